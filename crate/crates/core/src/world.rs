//! Synthetic fine-grained recognition world.
//!
//! A world has `n_super` super-categories, each with `subs_per_super`
//! sub-categories. Sub-category prototypes are unit vectors pulled toward
//! their super-category centroid by `inter_alpha`; images are prototypes plus
//! isotropic noise of scale `intra_sigma`, renormalized.
//!
//! Names are two tokens: a super-category word shared by every sibling and a
//! modifier word, e.g. `kadol amir`. Words are generated from fixed syllable
//! tables, so names are a pure function of `(world index, super id, modifier
//! index)` and never collide across worlds.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, seeded, StreamRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("seen fraction must lie in (0, 1), got {0}")]
    SeenFraction(f64),
    #[error("shots per class must be at least 1")]
    ZeroShots,
    #[error("sub-category {0} has no other seen category to draw a negative from")]
    NoNegative(usize),
    #[error("unknown sub-category {0}")]
    UnknownCategory(usize),
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_super: usize,
    pub subs_per_super: usize,
    pub feat_dim: usize,
    pub intra_sigma: f64,
    pub inter_alpha: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WorldError::InvalidSpec(m.to_string()));
        if self.n_super < 1 {
            return bad("n_super must be >= 1");
        }
        if self.subs_per_super < 2 {
            return bad("subs_per_super must be >= 2");
        }
        if self.feat_dim < 2 {
            return bad("feat_dim must be >= 2");
        }
        if !(self.intra_sigma >= 0.0 && self.intra_sigma.is_finite()) {
            return bad("intra_sigma must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.inter_alpha) {
            return bad("inter_alpha must lie in [0, 1]");
        }
        if self.n_super > MAX_SUPERS || self.subs_per_super > MAX_MODIFIERS {
            return bad("too many categories for the name tables");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCategory {
    pub id: usize,
    pub super_id: usize,
    /// `[super word, modifier word]`.
    pub name: Vec<String>,
    pub prototype: Vec<f64>,
}

impl SubCategory {
    pub fn name_text(&self) -> String {
        self.name.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SeenTrain,
    SeenTest,
    UnseenTest,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::SeenTrain => "seen-train",
            Split::SeenTest => "seen-test",
            Split::UnseenTest => "unseen-test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: u64,
    pub world: usize,
    pub sub_id: usize,
    pub feat: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub index: usize,
    pub spec: WorldSpec,
    pub super_names: Vec<String>,
    pub super_centroids: Vec<Vec<f64>>,
    pub subs: Vec<SubCategory>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SYLLABLES: usize = 14 * 5;
const MAX_WORLDS: usize = SYLLABLES;
const MAX_SUPERS: usize = SYLLABLES * 14;
const MAX_MODIFIERS: usize = SYLLABLES * SYLLABLES;

fn syllable(i: usize) -> [u8; 2] {
    [CONSONANTS[i % 14], VOWELS[(i / 14) % 5]]
}

/// Five-letter consonant-initial word, unique per `(world, super)`.
pub fn super_word(world: usize, super_id: usize) -> String {
    let w = syllable((world * 23 + 5) % SYLLABLES);
    let s = syllable((super_id % SYLLABLES * 37 + 11) % SYLLABLES);
    let fin = CONSONANTS[(super_id / SYLLABLES + 3) % 14];
    String::from_utf8(vec![w[0], w[1], s[0], s[1], fin]).expect("ascii")
}

/// Four-letter vowel-initial word, unique per modifier index.
pub fn modifier_word(j: usize) -> String {
    let k = (j * 1013 + 7) % MAX_MODIFIERS;
    let bytes = vec![
        VOWELS[k % 5],
        CONSONANTS[(k / 5) % 14],
        VOWELS[(k / 70) % 5],
        CONSONANTS[(k / 350) % 14],
    ];
    String::from_utf8(bytes).expect("ascii")
}

pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

fn unit_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(dim, rng);
        if v.iter().any(|&x| x != 0.0) {
            normalize(&mut v);
            return v;
        }
    }
}

/// Builds world `index` from its spec. Deterministic in `(index, spec)`.
pub fn generate_world(index: usize, spec: WorldSpec) -> Result<World> {
    spec.validate()?;
    if index >= MAX_WORLDS {
        return Err(WorldError::InvalidSpec(format!(
            "world index {index} exceeds {MAX_WORLDS}"
        )));
    }
    let mut rng = seeded(derive_seed(spec.seed, "world", "prototypes", 0));
    let d = spec.feat_dim;
    let a = spec.inter_alpha;
    let super_centroids: Vec<Vec<f64>> = (0..spec.n_super).map(|_| unit_vec(d, &mut rng)).collect();
    let mut subs = Vec::with_capacity(spec.n_super * spec.subs_per_super);
    for (s, centroid) in super_centroids.iter().enumerate() {
        for j in 0..spec.subs_per_super {
            let raw = unit_vec(d, &mut rng);
            let mut proto: Vec<f64> = raw
                .iter()
                .zip(centroid)
                .map(|(r, c)| (1.0 - a) * r + a * c)
                .collect();
            normalize(&mut proto);
            subs.push(SubCategory {
                id: subs.len(),
                super_id: s,
                name: vec![super_word(index, s), modifier_word(j)],
                prototype: proto,
            });
        }
    }
    Ok(World {
        index,
        spec,
        super_names: (0..spec.n_super).map(|s| super_word(index, s)).collect(),
        super_centroids,
        subs,
    })
}

/// Seen / unseen partition of a world's sub-categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CategorySplit {
    pub fn is_seen(&self, sub: usize) -> bool {
        self.seen.binary_search(&sub).is_ok()
    }
}

impl World {
    pub fn sub(&self, id: usize) -> Result<&SubCategory> {
        self.subs.get(id).ok_or(WorldError::UnknownCategory(id))
    }

    pub fn super_name_of(&self, sub: usize) -> Result<&str> {
        Ok(&self.super_names[self.sub(sub)?.super_id])
    }

    /// Every word the world's names use: super words then modifiers.
    pub fn name_words(&self) -> Vec<String> {
        let mut words = self.super_names.clone();
        words.extend((0..self.spec.subs_per_super).map(modifier_word));
        words
    }

    /// One noisy image of sub-category `sub`.
    pub fn sample_image(&self, sub: usize, split: Split, rng: &mut impl Rng) -> Result<ImageSample> {
        let proto = &self.sub(sub)?.prototype;
        let feat = if self.spec.intra_sigma == 0.0 {
            proto.clone()
        } else {
            let mut f: Vec<f64> = proto
                .iter()
                .map(|&p| p + self.spec.intra_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            normalize(&mut f);
            f
        };
        Ok(ImageSample {
            id: rng.random(),
            world: self.index,
            sub_id: sub,
            feat,
            split,
        })
    }

    /// Other seen category whose prototype is most cosine-similar to `sub`'s;
    /// ties go to the lowest id.
    pub fn hardest_negative(&self, sub: usize, seen: &[usize]) -> Result<usize> {
        let proto = &self.sub(sub)?.prototype;
        let mut best: Option<(usize, f64)> = None;
        for &c in seen {
            if c == sub {
                continue;
            }
            let sim = cosine(proto, &self.sub(c)?.prototype);
            match best {
                Some((id, s)) if s > sim || (s == sim && id < c) => {}
                _ => best = Some((c, sim)),
            }
        }
        best.map(|(id, _)| id).ok_or(WorldError::NoNegative(sub))
    }

    /// The `k` categories in `pool` most similar to `sub` (excluding it),
    /// most similar first, ties by lowest id.
    pub fn nearest(&self, sub: usize, pool: &[usize], k: usize) -> Result<Vec<usize>> {
        let proto = &self.sub(sub)?.prototype;
        let mut scored = Vec::with_capacity(pool.len());
        for &c in pool {
            if c != sub {
                scored.push((c, cosine(proto, &self.sub(c)?.prototype)));
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().take(k).map(|(c, _)| c).collect())
    }

    /// Pairwise prototype cosines as CSV (`a,b,cosine`).
    pub fn prototype_cosine_csv(&self) -> String {
        let mut out = String::from("a,b,cosine\n");
        for a in &self.subs {
            for b in &self.subs {
                out.push_str(&format!(
                    "{},{},{}\n",
                    a.id,
                    b.id,
                    cosine(&a.prototype, &b.prototype)
                ));
            }
        }
        out
    }

    pub fn manifest_json(&self, split: &CategorySplit, shot_files: &[String]) -> serde_json::Value {
        serde_json::json!({
            "index": self.index,
            "spec": self.spec,
            "super_names": self.super_names,
            "categories": self.subs.iter().map(|s| serde_json::json!({
                "id": s.id,
                "super_id": s.super_id,
                "name": s.name_text(),
                "prototype": s.prototype,
            })).collect::<Vec<_>>(),
            "seen": split.seen,
            "unseen": split.unseen,
            "shot_files": shot_files,
        })
    }
}

/// Stratified seen/unseen split. The overall seen count is
/// `round(N * seen_fraction)`; each super-category contributes the floor or
/// ceiling of its own share, the ceilings going to the largest remainders.
pub fn split_categories(world: &World, seen_fraction: f64, seed: u64) -> Result<CategorySplit> {
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(WorldError::SeenFraction(seen_fraction));
    }
    let mut rng = seeded(derive_seed(seed, "split", "categories", world.index as u64));
    let n_super = world.spec.n_super;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_super];
    for s in &world.subs {
        members[s.super_id].push(s.id);
    }
    let total = world.subs.len();
    let target = ((total as f64 * seen_fraction).round() as usize).clamp(1, total - 1);

    let mut counts: Vec<usize> = Vec::with_capacity(n_super);
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(n_super);
    for (s, m) in members.iter().enumerate() {
        let share = m.len() as f64 * seen_fraction;
        let base = (share + 1e-9).floor() as usize;
        counts.push(base.min(m.len()));
        remainders.push((s, share - base as f64));
    }
    // seeded shuffle, then stable sort: equal remainders tie-break randomly
    remainders.shuffle(&mut rng);
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut assigned: usize = counts.iter().sum();
    let mut cursor = 0;
    while assigned < target && cursor < remainders.len() * 2 {
        let s = remainders[cursor % remainders.len()].0;
        if counts[s] < members[s].len() {
            counts[s] += 1;
            assigned += 1;
        }
        cursor += 1;
    }
    while assigned > target {
        if let Some(s) = (0..n_super).filter(|&s| counts[s] > 0).max_by_key(|&s| counts[s]) {
            counts[s] -= 1;
            assigned -= 1;
        }
    }

    let mut seen = Vec::with_capacity(target);
    let mut unseen = Vec::with_capacity(total - target);
    let mut warnings = Vec::new();
    for (s, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng);
        seen.extend_from_slice(&m[..counts[s]]);
        unseen.extend_from_slice(&m[counts[s]..]);
        if counts[s] < 2 {
            let msg = format!(
                "world {} super {} has {} seen sub-categories; closed-world distractors degrade",
                world.index, s, counts[s]
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok(CategorySplit {
        seen,
        unseen,
        warnings,
    })
}

/// `k` training images for every seen category, in category order.
pub fn sample_fewshot(world: &World, seen: &[usize], k: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if k == 0 {
        return Err(WorldError::ZeroShots);
    }
    sample_images(world, seen, k, Split::SeenTrain, seed, "fewshot")
}

/// `per_class` images for each listed category.
pub fn sample_images(
    world: &World,
    subs: &[usize],
    per_class: usize,
    split: Split,
    seed: u64,
    purpose: &str,
) -> Result<Vec<ImageSample>> {
    let mut rng = seeded(derive_seed(seed, purpose, split.label(), world.index as u64));
    let mut out = Vec::with_capacity(subs.len() * per_class);
    for &s in subs {
        for _ in 0..per_class {
            out.push(world.sample_image(s, split, &mut rng)?);
        }
    }
    Ok(out)
}

/// `(x, x_pos, x_neg)` plus the query and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: ImageSample,
    pub positive: ImageSample,
    pub negative: ImageSample,
    pub query_id: usize,
    pub truth: usize,
    /// Set when the anchor's class had no second image and the positive is a
    /// re-noised copy of the anchor.
    pub degenerate: bool,
}

/// Pairs `anchor` with a random same-class image from `pool` and a fresh
/// image of the hardest negative seen category.
pub fn make_triplet(
    anchor: &ImageSample,
    pool: &[ImageSample],
    world: &World,
    seen: &[usize],
    query_id: usize,
    rng: &mut StreamRng,
) -> Result<Triplet> {
    let candidates: Vec<&ImageSample> = pool
        .iter()
        .filter(|s| s.sub_id == anchor.sub_id && s.id != anchor.id)
        .collect();
    let (positive, degenerate) = match candidates.as_slice() {
        [] => {
            let sigma = world.spec.intra_sigma;
            let mut feat: Vec<f64> = anchor
                .feat
                .iter()
                .map(|&x| x + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            normalize(&mut feat);
            let mut id: u64 = rng.random();
            if id == anchor.id {
                id = id.wrapping_add(1);
            }
            (
                ImageSample {
                    id,
                    feat,
                    ..anchor.clone()
                },
                true,
            )
        }
        some => ((*some[rng.random_range(0..some.len())]).clone(), false),
    };
    let neg_sub = world.hardest_negative(anchor.sub_id, seen)?;
    let negative = world.sample_image(neg_sub, anchor.split, rng)?;
    Ok(Triplet {
        anchor: anchor.clone(),
        positive,
        negative,
        query_id,
        truth: anchor.sub_id,
        degenerate,
    })
}
