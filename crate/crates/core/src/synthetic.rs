//! Small generated temporal KG with one symmetric and one hierarchy relation.
//!
//! Symmetric entities form cliques: every ordered pair inside a group is a fact,
//! reflexive pairs included, at each of the group's years. Hierarchy entities form
//! a tree and every `(ancestor, part_of⁻¹, descendant)` pair (and each node with
//! itself) is a fact at each hierarchy year. Within each group and year the pairs
//! `(m[j+1], m[j])` are held out: even `j` to test, odd `j` to validation. Their
//! reverse directions stay in training.

use std::path::Path;
use std::{fs, io};

use crate::quad_store::{DataError, DataOptions, Dataset, DateBound, RawFact, Year};

pub const SYMMETRIC: &str = "similar_to";
pub const HIERARCHY: &str = "contains";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub group_size: usize,
    /// Years per symmetric group.
    pub group_years: usize,
    /// `parent[i]` of tree node `i + 1`; node 0 is the root.
    pub tree_parents: Vec<usize>,
    pub hierarchy_years: Vec<Year>,
    pub first_year: Year,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            groups: 2,
            group_size: 6,
            group_years: 2,
            tree_parents: vec![0, 0, 1, 1, 2, 2, 3],
            hierarchy_years: (2000..2003).collect(),
            first_year: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticKg {
    pub train: Vec<RawFact>,
    pub valid: Vec<RawFact>,
    pub test: Vec<RawFact>,
}

impl SyntheticKg {
    pub fn fact_count(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn entity_count(&self) -> usize {
        let mut names: Vec<&str> = self
            .train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .flat_map(|f| [f.head.as_str(), f.tail.as_str()])
            .collect();
        names.sort_unstable();
        names.dedup();
        names.len()
    }

    pub fn dataset(&self) -> Result<Dataset, DataError> {
        Dataset::from_raw(&self.train, &self.valid, &self.test, DataOptions::default())
    }

    /// Writes `train.txt`, `valid.txt` and `test.txt` in the five-column TSV layout.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, facts) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            let mut text = String::new();
            for f in facts {
                text.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", f.head, f.relation, f.tail, f.since, f.until));
            }
            fs::write(dir.join(format!("{name}.txt")), text)?;
        }
        Ok(())
    }
}

fn at(h: String, r: &str, t: String, year: Year) -> RawFact {
    RawFact {
        head: h,
        relation: r.to_string(),
        tail: t,
        since: DateBound::Year(year),
        until: DateBound::Year(year),
    }
}

fn ancestors(parents: &[usize], mut node: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while node > 0 {
        node = parents[node - 1];
        out.push(node);
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticKg {
    assert!(spec.group_size >= 3, "groups need two distinct held-out pairs");
    let mut kg = SyntheticKg {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for g in 0..spec.groups {
        let members: Vec<String> = (0..spec.group_size).map(|i| format!("s{}", g * spec.group_size + i)).collect();
        for y in 0..spec.group_years {
            let year = spec.first_year + (g * spec.group_years + y) as Year;
            for (i, a) in members.iter().enumerate() {
                for (j, b) in members.iter().enumerate() {
                    let f = at(a.clone(), SYMMETRIC, b.clone(), year);
                    if i == j + 1 && j % 2 == 0 {
                        kg.test.push(f);
                    } else if i == j + 1 {
                        kg.valid.push(f);
                    } else {
                        kg.train.push(f);
                    }
                }
            }
        }
    }
    let nodes = spec.tree_parents.len() + 1;
    for &year in &spec.hierarchy_years {
        for n in 0..nodes {
            kg.train.push(at(format!("h{n}"), HIERARCHY, format!("h{n}"), year));
            for a in ancestors(&spec.tree_parents, n) {
                kg.train.push(at(format!("h{a}"), HIERARCHY, format!("h{n}"), year));
            }
        }
    }
    kg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_size() {
        let kg = generate(&SyntheticSpec::default());
        assert_eq!(kg.entity_count(), 20);
        // 2 groups x 36 pairs x 2 years + 3 years x (8 reflexive + 13 ancestor pairs).
        assert_eq!(kg.fact_count(), 144 + 63);
        assert_eq!(kg.test.len(), 12);
        assert_eq!(kg.valid.len(), 8);
    }

    #[test]
    fn held_out_pairs_have_training_reverse() {
        let kg = generate(&SyntheticSpec::default());
        for f in kg.test.iter().chain(&kg.valid) {
            assert!(kg
                .train
                .iter()
                .any(|g| g.head == f.tail && g.tail == f.head && g.since == f.since && g.relation == f.relation));
        }
    }

    #[test]
    fn written_files_load_back() {
        let kg = generate(&SyntheticSpec::default());
        let dir = tempfile::tempdir().unwrap();
        kg.write_dir(dir.path()).unwrap();
        let a = Dataset::load(dir.path(), DataOptions::default()).unwrap();
        let b = kg.dataset().unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn builds_dataset() {
        let ds = generate(&SyntheticSpec::default()).dataset().unwrap();
        assert_eq!(ds.vocab.num_entities(), 20);
        assert_eq!(ds.vocab.num_relations(), 2);
        assert_eq!(ds.train.len(), 187);
    }
}
