//! Seeded label corruption: symmetric (uniform over the other classes) and
//! asymmetric (class-conditional flips along a fixed map).

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::LabelVector;
use crate::rng::{stream, Purpose};

/// Fixed `source → target` class flips for asymmetric noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFlipMap {
    pairs: Vec<(usize, usize)>,
    num_classes: usize,
    /// `targets[c]` is the flip target of class `c`, if it is a source.
    targets: Vec<Option<usize>>,
}

impl ClassFlipMap {
    pub fn new(pairs: Vec<(usize, usize)>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("flip map needs at least 2 classes"));
        }
        let mut targets = vec![None; num_classes];
        for &(src, dst) in &pairs {
            if src >= num_classes || dst >= num_classes {
                return Err(Error::invalid(format!(
                    "flip {src}>{dst} outside [0, {num_classes})"
                )));
            }
            if src == dst {
                return Err(Error::invalid(format!("flip {src}>{dst} maps a class to itself")));
            }
            if targets[src].replace(dst).is_some() {
                return Err(Error::invalid(format!("class {src} appears twice as a source")));
            }
        }
        Ok(Self {
            pairs,
            num_classes,
            targets,
        })
    }

    /// Parses a `src>dst` comma list, e.g. `7>1,2>7,5>6,6>5,3>8`.
    pub fn parse(text: &str, num_classes: usize) -> Result<Self> {
        let pairs = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (src, dst) = item
                    .split_once('>')
                    .ok_or_else(|| Error::invalid(format!("flip `{item}` is not `src>dst`")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::invalid(format!("bad class index `{s}` in `{item}`")))
                };
                Ok((parse(src)?, parse(dst)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs, num_classes)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn target(&self, class: usize) -> Option<usize> {
        self.targets.get(class).copied().flatten()
    }

    pub fn is_source(&self, class: usize) -> bool {
        self.target(class).is_some()
    }
}

impl fmt::Display for ClassFlipMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (s, d)) in self.pairs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}>{d}")?;
        }
        Ok(())
    }
}

/// The benchmark flip maps: `mnist`, `cifar10` (standard class order) and
/// `cifar100` (circular shift inside each block of five fine labels).
pub fn builtin_flip_map(name: &str) -> Result<ClassFlipMap> {
    match name.trim().to_ascii_lowercase().as_str() {
        // 7→1, 2→7, 5↔6, 3→8
        "mnist" => ClassFlipMap::new(vec![(7, 1), (2, 7), (5, 6), (6, 5), (3, 8)], 10),
        // truck→automobile, bird→airplane, deer→horse, cat↔dog
        "cifar10" | "cifar-10" => {
            ClassFlipMap::new(vec![(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)], 10)
        }
        "cifar100" | "cifar-100" => {
            let pairs = (0..100)
                .map(|c| {
                    let base = c - c % 5;
                    (c, (c - base + 1) % 5 + base)
                })
                .collect();
            ClassFlipMap::new(pairs, 100)
        }
        other => Err(Error::invalid(format!("unknown flip map `{other}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

/// A complete, validated description of how to corrupt a label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Present exactly when `kind` is asymmetric.
    pub flip_map: Option<ClassFlipMap>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            kind: NoiseKind::Symmetric,
            rate,
            flip_map: None,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn asymmetric(rate: f64, flip_map: ClassFlipMap, seed: u64) -> Result<Self> {
        let spec = Self {
            kind: NoiseKind::Asymmetric,
            rate,
            flip_map: Some(flip_map),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `symmetric:<η>` or `asymmetric:<η>:<map>`, where `<map>` is a
    /// builtin map name or a `src>dst` list.
    pub fn parse(text: &str, num_classes: usize, seed: u64) -> Result<Self> {
        let mut parts = text.trim().splitn(3, ':');
        let kind = parts.next().unwrap_or_default().trim().to_ascii_lowercase();
        let rate: f64 = parts
            .next()
            .ok_or_else(|| Error::invalid(format!("noise spec `{text}` lacks a rate")))?
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad noise rate in `{text}`")))?;
        match kind.as_str() {
            "symmetric" | "sym" => Self::symmetric(rate, seed),
            "asymmetric" | "asym" => {
                let map = parts
                    .next()
                    .ok_or_else(|| Error::invalid(format!("asymmetric spec `{text}` lacks a map")))?;
                Self::asymmetric(rate, flip_map_from_text(map, num_classes)?, seed)
            }
            other => Err(Error::invalid(format!("unknown noise kind `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Symmetric => {
                if !(0.0..=1.0).contains(&self.rate) {
                    return Err(Error::invalid(format!(
                        "symmetric noise rate must be in [0, 1], got {}",
                        self.rate
                    )));
                }
            }
            NoiseKind::Asymmetric => {
                if !(0.0..0.5).contains(&self.rate) {
                    return Err(Error::invalid(format!(
                        "asymmetric noise rate must be in [0, 0.5), got {}",
                        self.rate
                    )));
                }
                if self.flip_map.is_none() {
                    return Err(Error::invalid("asymmetric noise needs a flip map"));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, labels: &LabelVector) -> Result<LabelVector> {
        self.validate()?;
        match (&self.kind, &self.flip_map) {
            (NoiseKind::Symmetric, _) => corrupt_symmetric(labels, self.rate, self.seed),
            (NoiseKind::Asymmetric, Some(map)) => {
                corrupt_asymmetric(labels, map, self.rate, self.seed)
            }
            (NoiseKind::Asymmetric, None) => unreachable!("validated above"),
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.kind, &self.flip_map) {
            (NoiseKind::Asymmetric, Some(map)) => write!(f, "asymmetric:{}:{map}", self.rate),
            _ => write!(f, "symmetric:{}", self.rate),
        }
    }
}

fn flip_map_from_text(text: &str, num_classes: usize) -> Result<ClassFlipMap> {
    let text = text.trim();
    if text.contains('>') {
        ClassFlipMap::parse(text, num_classes)
    } else {
        builtin_flip_map(text)
    }
}

/// With probability `rate`, replaces each label by a class drawn uniformly
/// from the other `k − 1` classes.
pub fn corrupt_symmetric(labels: &LabelVector, rate: f64, seed: u64) -> Result<LabelVector> {
    let k = labels.num_classes();
    if k < 2 {
        return Err(Error::invalid("symmetric noise needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate {rate} outside [0, 1]")));
    }
    let mut rng = stream(seed, Purpose::Noise, 0);
    let noisy = labels
        .labels()
        .iter()
        .map(|&y| {
            let u: f64 = rng.random();
            if u < rate {
                let r = rng.random_range(0..k - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            } else {
                y
            }
        })
        .collect();
    LabelVector::new(noisy, k)
}

/// With probability `rate`, moves each label whose class is a source of `map`
/// to the mapped target. Other labels never change.
pub fn corrupt_asymmetric(
    labels: &LabelVector,
    map: &ClassFlipMap,
    rate: f64,
    seed: u64,
) -> Result<LabelVector> {
    if map.num_classes() != labels.num_classes() {
        return Err(Error::invalid(format!(
            "flip map over {} classes, labels over {}",
            map.num_classes(),
            labels.num_classes()
        )));
    }
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::invalid(format!("asymmetric noise rate {rate} outside [0, 0.5)")));
    }
    let mut rng = stream(seed, Purpose::Noise, 0);
    let noisy = labels
        .labels()
        .iter()
        .map(|&y| {
            let u: f64 = rng.random();
            match map.target(y) {
                Some(t) if u < rate => t,
                _ => y,
            }
        })
        .collect();
    LabelVector::new(noisy, labels.num_classes())
}

/// Fraction of positions where the two label vectors disagree.
pub fn empirical_noise_rate(clean: &LabelVector, noisy: &LabelVector) -> Result<f64> {
    if clean.len() != noisy.len() {
        return Err(Error::invalid(format!(
            "label vectors differ in length: {} vs {}",
            clean.len(),
            noisy.len()
        )));
    }
    if clean.is_empty() {
        return Ok(0.0);
    }
    let changed = clean
        .labels()
        .iter()
        .zip(noisy.labels())
        .filter(|(a, b)| a != b)
        .count();
    Ok(changed as f64 / clean.len() as f64)
}
