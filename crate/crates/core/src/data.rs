//! Temporal knowledge graph datasets.
//!
//! Events are quadruplets (s, r, o, t): subject entity `s` relates to
//! object entity `o` under relation `r` at integer timestamp `t`. A
//! [`Dataset`] holds three time-disjoint splits plus vocabulary sizes, and
//! can be augmented with reverse relations: each base event (s, r, o, t)
//! gains a mirrored (o, r + R, s, t) so that information can flow in both
//! directions along an edge.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One event: subject `s`, relation `r`, object `o`, timestamp `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Quadruplet {
    pub t: i64,
    pub s: usize,
    pub r: usize,
    pub o: usize,
}

impl Quadruplet {
    pub fn new(s: usize, r: usize, o: usize, t: i64) -> Quadruplet {
        Quadruplet { t, s, r, o }
    }
}

/// A dataset with time-disjoint train/valid/test splits, each sorted by
/// timestamp. `num_base_relations` counts the relations present on disk;
/// after [`Dataset::add_reverse_relations`] the live vocabulary is twice
/// that.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Quadruplet>,
    pub valid: Vec<Quadruplet>,
    pub test: Vec<Quadruplet>,
    pub num_entities: usize,
    pub num_base_relations: usize,
    augmented: bool,
}

/// Closed `[min, max]` timestamp range of a split, if nonempty.
pub fn time_range(events: &[Quadruplet]) -> Option<(i64, i64)> {
    let min = events.iter().map(|e| e.t).min()?;
    let max = events.iter().map(|e| e.t).max()?;
    Some((min, max))
}

impl Dataset {
    pub fn new(
        train: Vec<Quadruplet>,
        valid: Vec<Quadruplet>,
        test: Vec<Quadruplet>,
        num_entities: usize,
        num_base_relations: usize,
    ) -> Result<Dataset> {
        let mut d = Dataset { train, valid, test, num_entities, num_base_relations, augmented: false };
        d.train.sort();
        d.valid.sort();
        d.test.sort();
        d.validate()?;
        Ok(d)
    }

    /// True once reverse relations have been added.
    pub fn augmented(&self) -> bool {
        self.augmented
    }

    /// Relation vocabulary currently in effect: R before augmentation,
    /// 2R after.
    pub fn num_relation_types(&self) -> usize {
        if self.augmented { 2 * self.num_base_relations } else { self.num_base_relations }
    }

    pub fn splits(&self) -> [&[Quadruplet]; 3] {
        [&self.train, &self.valid, &self.test]
    }

    pub fn all_events(&self) -> impl Iterator<Item = &Quadruplet> {
        self.train.iter().chain(self.valid.iter()).chain(self.test.iter())
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Dataset("empty split: train".into()));
        }
        let rel_bound = self.num_relation_types();
        for (name, split) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for e in split {
                if e.s >= self.num_entities || e.o >= self.num_entities {
                    return Err(Error::Dataset(format!(
                        "{name} split: entity id {} out of range (num_entities {})",
                        e.s.max(e.o),
                        self.num_entities
                    )));
                }
                if e.r >= rel_bound {
                    return Err(Error::Dataset(format!(
                        "{name} split: relation id {} out of range (vocab {rel_bound})",
                        e.r
                    )));
                }
                if e.t < 0 {
                    return Err(Error::Dataset(format!("{name} split: negative timestamp {}", e.t)));
                }
            }
        }
        let train_max = time_range(&self.train).map(|(_, b)| b);
        let valid_r = time_range(&self.valid);
        let test_r = time_range(&self.test);
        if let (Some(tm), Some((vmin, _))) = (train_max, valid_r) {
            if tm >= vmin {
                return Err(Error::Dataset(format!(
                    "train/valid splits overlap in time ({tm} >= {vmin})"
                )));
            }
        }
        if let (Some((_, vmax)), Some((tmin, _))) = (valid_r, test_r) {
            if vmax >= tmin {
                return Err(Error::Dataset(format!(
                    "valid/test splits overlap in time ({vmax} >= {tmin})"
                )));
            }
        }
        if self.valid.is_empty() {
            if let (Some(tm), Some((tmin, _))) = (train_max, test_r) {
                if tm >= tmin {
                    return Err(Error::Dataset(format!(
                        "train/test splits overlap in time ({tm} >= {tmin})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads `train.txt` / `valid.txt` / `test.txt` from a directory.
    ///
    /// Each line is tab-separated `s r o t`, with an optional fifth column
    /// that is ignored. Timestamps are divided by `granularity`. Vocabulary
    /// sizes come from an optional `stat.txt` (`num_entities
    /// num_relations`) or are inferred as max id + 1.
    pub fn load(dir: &Path, granularity: i64) -> Result<Dataset> {
        if granularity <= 0 {
            return Err(Error::Config(format!("granularity must be positive, got {granularity}")));
        }
        let train = read_split(&dir.join("train.txt"), granularity, true)?;
        let valid = read_split(&dir.join("valid.txt"), granularity, false)?;
        let test = read_split(&dir.join("test.txt"), granularity, false)?;

        let stat_path = dir.join("stat.txt");
        let (num_entities, num_base_relations) = if stat_path.exists() {
            read_stat(&stat_path)?
        } else {
            let all = train.iter().chain(&valid).chain(&test);
            let mut max_e = 0usize;
            let mut max_r = 0usize;
            for e in all {
                max_e = max_e.max(e.s).max(e.o);
                max_r = max_r.max(e.r);
            }
            (max_e + 1, max_r + 1)
        };
        Dataset::new(train, valid, test, num_entities, num_base_relations)
    }

    /// Writes the splits plus `stat.txt` into a directory, creating it if
    /// needed. Refuses to write an augmented dataset, since reloading
    /// would double the reverse edges.
    pub fn write(&self, dir: &Path) -> Result<()> {
        if self.augmented {
            return Err(Error::contract("refusing to write an augmented dataset"));
        }
        fs::create_dir_all(dir)?;
        for (name, split) in [("train.txt", &self.train), ("valid.txt", &self.valid), ("test.txt", &self.test)] {
            let mut out = String::new();
            for e in split {
                writeln!(out, "{}\t{}\t{}\t{}", e.s, e.r, e.o, e.t).expect("write to string");
            }
            fs::write(dir.join(name), out)?;
        }
        fs::write(
            dir.join("stat.txt"),
            format!("{}\t{}\n", self.num_entities, self.num_base_relations),
        )?;
        Ok(())
    }

    /// Doubles the relation vocabulary: every (s, r, o, t) gains a mirror
    /// (o, r + R, s, t) in the same split. Calling twice is an error, since
    /// the mirror of a mirror would alias the original relations.
    pub fn add_reverse_relations(&mut self) -> Result<()> {
        if self.augmented {
            return Err(Error::contract("reverse relations already added"));
        }
        let r_base = self.num_base_relations;
        for split in [&mut self.train, &mut self.valid, &mut self.test] {
            let mirrored: Vec<Quadruplet> = split
                .iter()
                .map(|e| Quadruplet::new(e.o, e.r + r_base, e.s, e.t))
                .collect();
            split.extend(mirrored);
            split.sort();
        }
        self.augmented = true;
        Ok(())
    }
}

/// Returns `events` plus the mirror (o, r + R, s, t) of each, sorted.
pub fn with_reverses(events: &[Quadruplet], num_base_relations: usize) -> Vec<Quadruplet> {
    let mut out = Vec::with_capacity(events.len() * 2);
    for e in events {
        out.push(*e);
        out.push(Quadruplet::new(e.o, e.r + num_base_relations, e.s, e.t));
    }
    out.sort();
    out
}

fn read_split(path: &Path, granularity: i64, required: bool) -> Result<Vec<Quadruplet>> {
    if !path.exists() {
        if required {
            return Err(Error::Dataset(format!("missing split file {}", path.display())));
        }
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse = |s: &str, what: &str| -> Result<i64> {
            s.parse::<i64>().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("invalid {what}: `{s}`"),
            })
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected at least 4 columns, got {}", fields.len()),
            });
        }
        let s = parse(fields[0], "subject id")?;
        let r = parse(fields[1], "relation id")?;
        let o = parse(fields[2], "object id")?;
        let t = parse(fields[3], "timestamp")?;
        if s < 0 || r < 0 || o < 0 || t < 0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "negative field".into(),
            });
        }
        events.push(Quadruplet::new(s as usize, r as usize, o as usize, t / granularity));
    }
    if required && events.is_empty() {
        return Err(Error::Dataset(format!("empty split: {}", path.display())));
    }
    Ok(events)
}

fn read_stat(path: &Path) -> Result<(usize, usize)> {
    let text = fs::read_to_string(path)?;
    let mut nums = text.split_whitespace();
    let mut next = |what: &str| -> Result<usize> {
        nums.next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("missing or invalid {what}"),
            })
    };
    let e = next("num_entities")?;
    let r = next("num_relations")?;
    Ok((e, r))
}

/// Shape of the synthetic event stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthPattern {
    /// Object is a fixed random function of (s, r): perfectly predictable
    /// from the pair alone.
    Functional,
    /// Object cycles through `period` distinct entities per (s, r) with a
    /// random phase.
    Periodic { period: usize },
}

/// Generates one event per (subject, relation) pair per timestamp, split
/// 80/10/10 by time. Deterministic for a given seed.
pub fn generate_synthetic(
    num_entities: usize,
    num_relations: usize,
    num_timestamps: usize,
    pattern: SynthPattern,
    seed: u64,
) -> Result<Dataset> {
    if num_entities < 2 || num_relations < 1 || num_timestamps < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs >= 2 entities, >= 1 relation, >= 2 timestamps; got {num_entities}/{num_relations}/{num_timestamps}"
        )));
    }
    if let SynthPattern::Periodic { period } = pattern {
        if period < 2 || period > num_entities {
            return Err(Error::Config(format!(
                "period must be in [2, num_entities]; got {period} with {num_entities} entities"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    enum Rule {
        Fixed(usize),
        Cycle { targets: Vec<usize>, phase: usize },
    }
    let mut rules = Vec::with_capacity(num_entities * num_relations);
    for _ in 0..num_entities {
        for _ in 0..num_relations {
            let rule = match pattern {
                SynthPattern::Functional => Rule::Fixed(rng.gen_range(0..num_entities)),
                SynthPattern::Periodic { period } => {
                    let mut pool: Vec<usize> = (0..num_entities).collect();
                    pool.shuffle(&mut rng);
                    pool.truncate(period);
                    let phase = rng.gen_range(0..period);
                    Rule::Cycle { targets: pool, phase }
                }
            };
            rules.push(rule);
        }
    }

    let train_end = (num_timestamps * 8) / 10;
    let valid_end = (num_timestamps * 9) / 10;
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for t in 0..num_timestamps {
        let bucket = if t < train_end {
            &mut train
        } else if t < valid_end {
            &mut valid
        } else {
            &mut test
        };
        for s in 0..num_entities {
            for r in 0..num_relations {
                let o = match &rules[s * num_relations + r] {
                    Rule::Fixed(o) => *o,
                    Rule::Cycle { targets, phase } => targets[(t + phase) % targets.len()],
                };
                bucket.push(Quadruplet::new(s, r, o, t as i64));
            }
        }
    }
    Dataset::new(train, valid, test, num_entities, num_relations)
}
