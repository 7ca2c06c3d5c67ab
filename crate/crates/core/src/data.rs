//! Synthetic scenes standing in for detected people in an image.
//!
//! A scene partitions its participants into groups. Every group of two or
//! more people performs one interaction: one member takes the active role and
//! the others the passive role. Singletons take the solo action. A person's
//! feature is the prototype of their action plus Gaussian noise plus an offset
//! shared by their group, so both actions and interactions are recoverable.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::car::Labeling;
use crate::error::{Error, Result};
use crate::graph::PairIndexMap;
use crate::oracle::CompatTable;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub name: String,
    pub active: usize,
    pub passive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_people: usize,
    pub max_people: usize,
    pub feature_dim: usize,
    pub action_names: Vec<String>,
    /// Action taken by people outside any group.
    pub solo_action: usize,
    pub interactions: Vec<Interaction>,
    /// Relative weight of group sizes 1, 2, 3, ...
    pub group_size_weights: Vec<f64>,
    pub noise: f64,
    pub group_offset: f64,
    /// Explicit prototypes, one per action. When absent they are drawn from
    /// `prototype_seed`.
    pub prototypes: Option<Vec<Vec<f64>>>,
    pub prototype_seed: u64,
    pub prototype_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let names = [
            "no-action",
            "handshake",
            "hug",
            "kick",
            "be-kicked",
            "punch",
            "be-punched",
            "push",
            "be-pushed",
        ];
        let pair = |name: &str, active, passive| Interaction {
            name: name.into(),
            active,
            passive,
        };
        Self {
            min_people: 3,
            max_people: 6,
            feature_dim: 32,
            action_names: names.iter().map(|s| s.to_string()).collect(),
            solo_action: 0,
            interactions: vec![
                pair("handshake", 1, 1),
                pair("hug", 2, 2),
                pair("kick", 3, 4),
                pair("punch", 5, 6),
                pair("push", 7, 8),
            ],
            group_size_weights: vec![1.0, 2.0, 1.0],
            noise: 0.5,
            group_offset: 1.0,
            prototypes: None,
            prototype_seed: 0x5eed,
            prototype_scale: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let classes = self.num_actions();
        if self.min_people < 2 || self.max_people < self.min_people {
            return bad(format!(
                "people range {}..={} must start at 2 or more",
                self.min_people, self.max_people
            ));
        }
        if classes < 2 || self.feature_dim == 0 {
            return bad("need at least 2 actions and a positive feature dimension".into());
        }
        if self.solo_action >= classes {
            return bad(format!("solo action {} outside {classes} actions", self.solo_action));
        }
        if self.interactions.is_empty() {
            return bad("no interactions configured".into());
        }
        if let Some(i) = self
            .interactions
            .iter()
            .find(|i| i.active >= classes || i.passive >= classes)
        {
            return bad(format!("interaction {} uses an unknown action", i.name));
        }
        if self.group_size_weights.is_empty()
            || self.group_size_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.group_size_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("group size weights must be nonnegative with a positive sum".into());
        }
        if !(self.noise >= 0.0 && self.group_offset >= 0.0 && self.prototype_scale >= 0.0) {
            return bad("noise, offset and prototype scales must be nonnegative".into());
        }
        if let Some(p) = &self.prototypes {
            if p.len() != classes {
                return bad(format!("{} prototypes for {classes} actions", p.len()));
            }
            if p.iter().any(|v| v.len() != self.feature_dim) {
                return bad("prototype length differs from the feature dimension".into());
            }
        }
        Ok(())
    }

    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        if let Some(p) = &self.prototypes {
            return p.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        (0..self.num_actions())
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        self.prototype_scale * g
                    })
                    .collect()
            })
            .collect()
    }

    /// Action pairs that may co-occur inside a group.
    pub fn compat_table(&self) -> Result<CompatTable> {
        let pairs: Vec<(usize, usize)> = self
            .interactions
            .iter()
            .flat_map(|i| [(i.active, i.passive), (i.passive, i.passive)])
            .collect();
        CompatTable::new(self.num_actions(), &pairs)
    }
}

/// One scene with ground-truth labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub features: Vec<Vec<f64>>,
    pub y_true: Vec<usize>,
    /// Indexed by pair slot.
    pub z_true: Vec<u8>,
    pub groups: Vec<Vec<usize>>,
}

impl SceneSample {
    pub fn participants(&self) -> usize {
        self.features.len()
    }

    pub fn truth(&self) -> Labeling {
        Labeling {
            y: self.y_true.clone(),
            z: self.z_true.clone(),
        }
    }

    /// Same scene with participant `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.participants();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the participants".into()));
        }
        let map = PairIndexMap::new(n);
        let mut features = vec![Vec::new(); n];
        let mut y_true = vec![0; n];
        for i in 0..n {
            features[perm[i]] = self.features[i].clone();
            y_true[perm[i]] = self.y_true[i];
        }
        let mut z_true = vec![0; self.z_true.len()];
        for (slot, (u, v)) in map.pairs().enumerate() {
            z_true[map.unordered_slot(perm[u], perm[v])?] = self.z_true[slot];
        }
        let mut groups: Vec<Vec<usize>> = self
            .groups
            .iter()
            .map(|g| {
                let mut g: Vec<usize> = g.iter().map(|&i| perm[i]).collect();
                g.sort_unstable();
                g
            })
            .collect();
        groups.sort();
        Ok(Self {
            features,
            y_true,
            z_true,
            groups,
        })
    }
}

fn sample_partition(rng: &mut ChaCha8Rng, n: usize, weights: &[f64]) -> Vec<Vec<usize>> {
    let mut people: Vec<usize> = (0..n).collect();
    people.shuffle(rng);
    let mut groups = Vec::new();
    let mut rest = &people[..];
    while !rest.is_empty() {
        let max = rest.len().min(weights.len());
        let total: f64 = weights[..max].iter().sum();
        let size = if total <= 0.0 {
            1
        } else {
            let mut pick = rng.random::<f64>() * total;
            let mut size = max;
            for (k, w) in weights[..max].iter().enumerate() {
                if pick < *w {
                    size = k + 1;
                    break;
                }
                pick -= w;
            }
            size
        };
        let (head, tail) = rest.split_at(size);
        let mut g = head.to_vec();
        g.sort_unstable();
        groups.push(g);
        rest = tail;
    }
    groups.sort();
    groups
}

/// Generates one scene; identical `(config, seed)` give identical scenes.
pub fn gen_scene(config: &SceneConfig, seed: u64) -> Result<SceneSample> {
    config.validate()?;
    let prototypes = config.prototypes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(config.min_people..=config.max_people);
    let groups = sample_partition(&mut rng, n, &config.group_size_weights);
    Ok(scene_from_groups(config, &prototypes, groups, &mut rng))
}

/// Builds labels and features for a fixed partition.
pub fn scene_from_groups(
    config: &SceneConfig,
    prototypes: &[Vec<f64>],
    groups: Vec<Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> SceneSample {
    let n: usize = groups.iter().map(Vec::len).sum();
    let map = PairIndexMap::new(n);
    let mut y_true = vec![config.solo_action; n];
    let mut z_true = vec![0u8; map.pair_count()];
    let mut features = vec![Vec::new(); n];
    for g in &groups {
        if g.len() > 1 {
            let kind = &config.interactions[rng.random_range(0..config.interactions.len())];
            let lead = g[rng.random_range(0..g.len())];
            for &p in g {
                y_true[p] = if p == lead { kind.active } else { kind.passive };
            }
            for (a, &u) in g.iter().enumerate() {
                for &v in &g[a + 1..] {
                    z_true[map.unordered_slot(u, v).expect("distinct members")] = 1;
                }
            }
        }
        let offset: Vec<f64> = (0..config.feature_dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                config.group_offset * g
            })
            .collect();
        for &p in g {
            features[p] = prototypes[y_true[p]]
                .iter()
                .zip(&offset)
                .map(|(proto, off)| {
                    let eps: f64 = StandardNormal.sample(rng);
                    proto + config.noise * eps + off
                })
                .collect();
        }
    }
    SceneSample {
        features,
        y_true,
        z_true,
        groups,
    }
}

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut x = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub const TRAIN_STREAM: u64 = 1;
pub const VALIDATION_STREAM: u64 = 2;

/// `count` scenes drawn from the seed stream `tag`.
pub fn gen_scenes(config: &SceneConfig, seed: u64, tag: u64, count: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|k| gen_scene(config, derive_seed(seed, tag, k as u64)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    n: usize,
    features: Vec<Vec<f64>>,
    y_true: Vec<usize>,
    /// `[u, v, bit]` in lexicographic pair order.
    z_true: Vec<(usize, usize, u8)>,
    #[serde(default)]
    groups: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct LabelingFile {
    n: usize,
    y: Vec<usize>,
    z: Vec<(usize, usize, u8)>,
}

fn pair_bits(z: &[u8], n: usize) -> Vec<(usize, usize, u8)> {
    PairIndexMap::new(n)
        .pairs()
        .zip(z)
        .map(|((u, v), &b)| (u, v, b))
        .collect()
}

fn bits_from_pairs(entries: &[(usize, usize, u8)], n: usize) -> Result<Vec<u8>> {
    let map = PairIndexMap::new(n);
    if entries.len() != map.pair_count() {
        return Err(Error::Format(format!(
            "{} relation entries for {n} participants",
            entries.len()
        )));
    }
    let mut z = vec![0u8; entries.len()];
    let mut seen = vec![false; entries.len()];
    for &(u, v, b) in entries {
        let slot = map.slot(u, v).map_err(|e| Error::Format(e.to_string()))?;
        if b > 1 || std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Format(format!("bad relation entry ({u}, {v}, {b})")));
        }
        z[slot] = b;
    }
    Ok(z)
}

impl SceneSample {
    pub fn to_json(&self) -> Result<String> {
        let n = self.participants();
        Ok(serde_json::to_string_pretty(&SceneFile {
            n,
            features: self.features.clone(),
            y_true: self.y_true.clone(),
            z_true: pair_bits(&self.z_true, n),
            groups: self.groups.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SceneFile = serde_json::from_str(text)?;
        if f.n < 2 || f.features.len() != f.n || f.y_true.len() != f.n {
            return Err(Error::Format(format!(
                "scene declares {} participants but lists {} features and {} actions",
                f.n,
                f.features.len(),
                f.y_true.len()
            )));
        }
        let dim = f.features[0].len();
        if f.features.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Format("feature rows must be finite and equally long".into()));
        }
        let z_true = bits_from_pairs(&f.z_true, f.n)?;
        Ok(Self {
            features: f.features,
            y_true: f.y_true,
            z_true,
            groups: f.groups,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }
}

impl Labeling {
    pub fn to_json(&self) -> Result<String> {
        let n = self.participants();
        Ok(serde_json::to_string_pretty(&LabelingFile {
            n,
            y: self.y.clone(),
            z: pair_bits(&self.z, n),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: LabelingFile = serde_json::from_str(text)?;
        if f.n < 2 || f.y.len() != f.n {
            return Err(Error::Format(format!(
                "labeling declares {} participants but lists {} actions",
                f.n,
                f.y.len()
            )));
        }
        Ok(Self {
            z: bits_from_pairs(&f.z, f.n)?,
            y: f.y,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }
}
