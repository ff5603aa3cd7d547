use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Labeled share of a dataset, kept as an exact reduced ratio in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fraction {
    num: u64,
    den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::Usage(format!(
                "fraction {num}/{den} is not in (0, 1]"
            )));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(fraction * n)`, computed exactly.
    pub fn count_of(&self, n: usize) -> usize {
        (n as u128 * self.num as u128 / self.den as u128) as usize
    }
}

impl FromStr for Fraction {
    type Err = Error;

    /// Accepts `"1/8"`, `"0.125"` or `"1"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Usage(format!("cannot parse fraction {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Fraction::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18
            || !int.chars().all(|c| c.is_ascii_digit())
            || !frac.chars().all(|c| c.is_ascii_digit())
            || (int.is_empty() && frac.is_empty())
        {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(bad)?;
        Fraction::new(num, den)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hex SHA-256 of the newline-joined sorted id list.
pub fn source_checksum(index: &DatasetIndex) -> String {
    let mut hasher = Sha256::new();
    for (i, id) in index.ids().enumerate() {
        if i > 0 {
            hasher.update(b"\n");
        }
        hasher.update(id.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub fraction: Fraction,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub source_checksum: String,
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
    }

    /// Checks that the manifest partitions exactly the ids of `index`.
    pub fn validate(&self, index: &DatasetIndex) -> Result<()> {
        if self.source_checksum != source_checksum(index) {
            return Err(Error::Data(format!(
                "manifest was made for a different dataset than {}",
                index.root.display()
            )));
        }
        let mut all: Vec<&str> = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .map(String::as_str)
            .collect();
        all.sort_unstable();
        if !all.iter().copied().eq(index.ids()) {
            return Err(Error::Data(
                "manifest ids do not partition the dataset".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded random labeled/unlabeled partition.
///
/// The sorted ids are shuffled by a generator keyed on `seed`, and the first
/// `floor(fraction * N)` become the labeled set.
pub fn make_split(index: &DatasetIndex, fraction: Fraction, seed: u64) -> Result<SplitManifest> {
    let n_labeled = fraction.count_of(index.len());
    if n_labeled == 0 {
        return Err(Error::Usage(format!(
            "fraction {fraction} of {} images labels nothing",
            index.len()
        )));
    }
    let mut ids: Vec<String> = index.ids().map(str::to_owned).collect();
    ids.sort_unstable();
    ids.shuffle(&mut substream(seed, "split", &[]));
    let unlabeled = ids.split_off(n_labeled);
    Ok(SplitManifest {
        fraction,
        seed,
        labeled: ids,
        unlabeled,
        source_checksum: source_checksum(index),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetEntry, CLASS_COUNT};
    use proptest::prelude::*;
    use std::collections::HashSet;

    pub(crate) fn fake_index(n: usize) -> DatasetIndex {
        DatasetIndex {
            root: "/virtual".into(),
            entries: (0..n)
                .map(|i| DatasetEntry {
                    id: format!("{i:05}"),
                    image_path: format!("/virtual/images/{i:05}.png").into(),
                    mask_path: format!("/virtual/masks/{i:05}.png").into(),
                })
                .collect(),
            class_count: CLASS_COUNT,
        }
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(
            "1/8".parse::<Fraction>().unwrap(),
            Fraction::new(1, 8).unwrap()
        );
        assert_eq!(
            "0.125".parse::<Fraction>().unwrap(),
            Fraction::new(1, 8).unwrap()
        );
        assert_eq!("1".parse::<Fraction>().unwrap().to_string(), "1");
        assert_eq!("2/16".parse::<Fraction>().unwrap().to_string(), "1/8");
        for bad in ["0", "0/3", "3/2", "1.5", "x", "", "1/0", "-1/2", "."] {
            assert!(bad.parse::<Fraction>().is_err(), "{bad}");
        }
    }

    #[test]
    fn published_split_counts() {
        let index = fake_index(1000);
        for (f, n) in [("1/2", 500), ("1/4", 250), ("1/8", 125), ("1/16", 62)] {
            let m = make_split(&index, f.parse().unwrap(), 3).unwrap();
            assert_eq!(m.labeled.len(), n, "{f}");
            assert_eq!(m.unlabeled.len(), 1000 - n);
        }
    }

    #[test]
    fn full_supervision_and_empty_labeled() {
        let index = fake_index(8);
        let m = make_split(&index, Fraction::new(1, 1).unwrap(), 0).unwrap();
        assert_eq!((m.labeled.len(), m.unlabeled.len()), (8, 0));
        assert!(make_split(&index, Fraction::new(1, 16).unwrap(), 0).is_err());
    }

    #[test]
    fn manifest_json_round_trip() {
        let index = fake_index(20);
        let m = make_split(&index, "1/4".parse().unwrap(), 9).unwrap();
        let json = m.to_json();
        assert!(json.contains("\"fraction\": \"1/4\""));
        let back: SplitManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        back.validate(&index).unwrap();
        assert!(back.validate(&fake_index(21)).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(n in 1usize..300, num in 1u64..16, extra in 0u64..16, seed in any::<u64>()) {
            let fraction = Fraction::new(num, num + extra).unwrap();
            let index = fake_index(n);
            match make_split(&index, fraction, seed) {
                Ok(m) => {
                    prop_assert_eq!(m.labeled.len(), (n as u64 * num / (num + extra)) as usize);
                    let l: HashSet<_> = m.labeled.iter().collect();
                    let u: HashSet<_> = m.unlabeled.iter().collect();
                    prop_assert!(l.is_disjoint(&u));
                    prop_assert_eq!(l.len() + u.len(), n);
                    prop_assert_eq!(make_split(&index, fraction, seed).unwrap(), m);
                }
                Err(_) => prop_assert_eq!(fraction.count_of(n), 0),
            }
        }
    }
}
