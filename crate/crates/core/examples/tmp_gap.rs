use ptbox::evaluator::probe;
use ptbox::model::*;
use ptbox::synthetic::*;
use ptbox::trainer::*;
use ptbox::box_algebra::MeetMode;
use ptbox::quad_store::*;

struct Obs<'a> { ds: &'a Dataset }
fn gaps(m: &ModelParams, ds: &Dataset) -> (f64, f64) {
    let r0 = ds.vocab.relation_id(SYMMETRIC).unwrap();
    let g: Vec<f64> = ds.test.iter().map(|q| { let inst = probe::ProbeInstance { pattern: probe::Pattern::Symmetry, relations: vec![r0], entities: vec![q.h, q.t] }; probe::evaluate_instance(m, &inst, q.tau, 1e-6).unwrap().values[0].1 }).collect();
    (g.iter().sum::<f64>() / g.len() as f64, g.iter().cloned().fold(0.0, f64::max))
}
impl FitObserver for Obs<'_> {
    fn on_epoch(&mut self, r: &EpochRecord, m: &ModelParams, imp: bool) -> std::io::Result<()> {
        if r.epoch % 25 == 0 || imp || r.epoch < 6 { let (a, b) = gaps(m, self.ds); println!("{} loss {:.4} val {:?} imp {} gap {:.4} {:.4}", r.epoch, r.loss, r.val_mrr, imp, a, b); }
        Ok(())
    }
}
fn main() {
    let a: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let ds = generate(&SyntheticSpec::default()).dataset().unwrap();
    let mcfg = ModelConfig { dim: a[1] as usize, order: 3, beta: a[2], meet: if a[3] > 0.0 { MeetMode::Hard } else { MeetMode::Gumbel }, ..ModelConfig::default() };
    let tcfg = TrainConfig { lr: a[0], epochs: 500, batch_size: a[4] as usize, eval_every: 1, neg_ratio: a[5] as usize, seed: 1, ..TrainConfig::default() };
    let m = init_for_vocab(&ds.vocab, &mcfg, &mut stream_rng(1, Stream::Init));
    let res = fit(&ds, m, &tcfg, &mut Obs { ds: &ds }).unwrap();
    println!("best epoch {:?} gap {:?}", res.best_epoch, gaps(&res.best, &ds));
}
