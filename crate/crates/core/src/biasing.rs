//! Biasing-list management: entity-index label construction, hard-negative
//! mining, and inference-list assembly.

use crate::error::{Error, Result};
use crate::phonology::{edit_distance, PhonemeInventory, PhonemeSequence};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

/// Reserved surface token of the index-0 pseudo-entity.
pub const NO_BIAS_TOKEN: &str = "<no-bias>";

/// One biasing-list entry: surface tokens plus phoneme sequence. `id` is
/// the global inventory id (>= 1 for real entities, 0 only for the
/// reserved `<no-bias>` entry).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: usize,
    pub surface: Vec<String>,
    pub phonemes: PhonemeSequence,
}

impl Entity {
    pub fn new(id: usize, surface: Vec<String>, phonemes: PhonemeSequence) -> Result<Self> {
        if surface.is_empty() {
            return Err(Error::contract(format!("entity {id} has empty surface")));
        }
        if phonemes.is_empty() {
            return Err(Error::contract(format!(
                "entity {id} has empty phoneme sequence"
            )));
        }
        Ok(Entity {
            id,
            surface,
            phonemes,
        })
    }

    fn no_bias(inv: &PhonemeInventory) -> Self {
        Entity {
            id: 0,
            surface: vec![NO_BIAS_TOKEN.to_string()],
            phonemes: PhonemeSequence::new(vec![inv.nb_index()]),
        }
    }
}

/// Ordered entities with the reserved `<no-bias>` entry at index 0.
/// Positions in this list are what entity labels and filtered sets refer
/// to; `Entity::id` stays the global id.
#[derive(Debug, Clone)]
pub struct BiasingList {
    entries: Vec<Entity>,
    surfaces: HashSet<Vec<String>>,
}

impl BiasingList {
    pub fn new(inv: &PhonemeInventory) -> Self {
        BiasingList {
            entries: vec![Entity::no_bias(inv)],
            surfaces: HashSet::new(),
        }
    }

    /// Appends an entity; surface forms must be unique among indices >= 1.
    pub fn push(&mut self, entity: Entity) -> Result<usize> {
        if entity.id == 0 {
            return Err(Error::contract("entity id 0 is reserved for <no-bias>"));
        }
        if !self.surfaces.insert(entity.surface.clone()) {
            return Err(Error::contract(format!(
                "duplicate surface form {:?} in biasing list",
                entity.surface
            )));
        }
        self.entries.push(entity);
        Ok(self.entries.len() - 1)
    }

    pub fn entry(&self, index: usize) -> &Entity {
        &self.entries[index]
    }

    pub fn entries(&self) -> &[Entity] {
        &self.entries
    }

    /// Number of real entities (list length excluding index 0).
    pub fn num_entities(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// List index of the entity with global id `id`, if present.
    pub fn index_of_entity_id(&self, id: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    pub fn contains_surface(&self, surface: &[String]) -> bool {
        self.surfaces.contains(surface)
    }

    /// Writes the TSV format `id<TAB>surface tokens<TAB>phonemes`. The
    /// reserved index-0 entry is never written.
    pub fn save(&self, path: &Path, inv: &PhonemeInventory) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries[1..] {
            writeln!(
                out,
                "{}\t{}\t{}",
                e.id,
                e.surface.join(" "),
                e.phonemes.to_symbols(inv).join(" ")
            )
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads the TSV format; phoneme symbols must already exist in `inv`.
    pub fn load(path: &Path, inv: &PhonemeInventory) -> Result<BiasingList> {
        Self::load_impl(path, inv, None)
    }

    /// Reads the TSV format, interning unseen phoneme symbols. For
    /// standalone list files with no accompanying lexicon.
    pub fn load_interning(path: &Path, inv: &mut PhonemeInventory) -> Result<BiasingList> {
        let snapshot = inv.clone();
        Self::load_impl(path, &snapshot, Some(inv))
    }

    fn load_impl(
        path: &Path,
        inv: &PhonemeInventory,
        mut intern: Option<&mut PhonemeInventory>,
    ) -> Result<BiasingList> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)?;
        let mut list = BiasingList::new(inv);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(id), Some(surface), Some(phones)) =
                (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::malformed(
                    &display,
                    format!("line {}: expected 3 tab-separated fields", lineno + 1),
                ));
            };
            let id: usize = id.parse().map_err(|_| {
                Error::malformed(&display, format!("line {}: bad id `{id}`", lineno + 1))
            })?;
            if id == 0 {
                return Err(Error::malformed(
                    &display,
                    format!("line {}: id 0 is reserved", lineno + 1),
                ));
            }
            let surface: Vec<String> = surface.split_whitespace().map(String::from).collect();
            let mut seq = Vec::new();
            for p in phones.split_whitespace() {
                let idx = match intern.as_deref_mut() {
                    Some(growing) => growing.intern(p),
                    None => inv
                        .index_of(p)
                        .ok_or_else(|| Error::UnknownPhoneme(p.to_string()))?,
                };
                seq.push(idx);
            }
            list.push(Entity::new(id, surface, PhonemeSequence::new(seq))?)?;
        }
        Ok(list)
    }
}

/// Per-token supervision labels: the biasing-list index at each transcript
/// position, non-zero only at entity first tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityIndexSequence(pub Vec<usize>);

impl EntityIndexSequence {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Annotated entity occurrence: token range plus the list index it binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub bias_id: usize,
}

/// Mined phonetic distractors for one target entity (global ids).
/// A degenerate pool can leave `negative_ids` shorter than requested,
/// down to empty; callers surface that as a warning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegativeSet {
    pub target_id: usize,
    pub negative_ids: Vec<usize>,
}

/// Builds the label sequence: `start` of each span carries its list index,
/// every other position is 0 (the `<no-bias>` index).
pub fn build_entity_labels(
    transcript_len: usize,
    spans: &[EntitySpan],
) -> Result<EntityIndexSequence> {
    let mut beta = vec![0usize; transcript_len];
    let mut covered = vec![false; transcript_len];
    for span in spans {
        if span.start >= span.end || span.end > transcript_len {
            return Err(Error::InvalidSpan {
                start: span.start,
                end: span.end,
                len: transcript_len,
            });
        }
        if span.bias_id == 0 {
            return Err(Error::contract(format!(
                "span {}..{} labels the reserved index 0",
                span.start, span.end
            )));
        }
        for pos in span.start..span.end {
            if covered[pos] {
                return Err(Error::OverlappingSpans(pos));
            }
            covered[pos] = true;
        }
        beta[span.start] = span.bias_id;
    }
    Ok(EntityIndexSequence(beta))
}

/// Greedy leftmost-longest match of list surfaces against the transcript;
/// scanning resumes after each match, so spans never overlap.
pub fn find_entity_spans(transcript: &[String], list: &BiasingList) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut pos = 0;
    while pos < transcript.len() {
        let mut best: Option<(usize, usize)> = None; // (surface len, list index)
        for (idx, entity) in list.entries().iter().enumerate().skip(1) {
            let s = &entity.surface;
            if pos + s.len() <= transcript.len() && transcript[pos..pos + s.len()] == s[..] {
                let better = match best {
                    Some((len, _)) => s.len() > len,
                    None => true,
                };
                if better {
                    best = Some((s.len(), idx));
                }
            }
        }
        match best {
            Some((len, idx)) => {
                spans.push(EntitySpan {
                    start: pos,
                    end: pos + len,
                    bias_id: idx,
                });
                pos += len;
            }
            None => pos += 1,
        }
    }
    spans
}

/// The `count` pool entities phoneme-nearest to the target, excluding the
/// target itself and anything with an identical surface form. Ties break
/// on id ascending. A pool too small after exclusions yields fewer.
pub fn mine_hard_negatives(target: &Entity, pool: &[Entity], count: usize) -> HardNegativeSet {
    assert!(
        (1..=3).contains(&count),
        "hard-negative count {count} outside [1, 3]"
    );
    let mut ranked: Vec<(usize, usize)> = pool
        .iter()
        .filter(|e| e.id != target.id && e.surface != target.surface)
        .map(|e| (edit_distance(&target.phonemes, &e.phonemes), e.id))
        .collect();
    ranked.sort();
    HardNegativeSet {
        target_id: target.id,
        negative_ids: ranked.into_iter().take(count).map(|(_, id)| id).collect(),
    }
}

/// Assembles the per-utterance inference list: `<no-bias>` + ground-truth
/// entities + `n_distractors` pool entries. Distractors are taken
/// phoneme-nearest to the GT entities first (round-robin, up to three per
/// GT entity), then filled by seeded random draws. Deterministic given
/// the seed; an exhausted pool yields a shorter list.
pub fn assemble_inference_list(
    gt: &[Entity],
    distractor_pool: &[Entity],
    n_distractors: usize,
    seed: u64,
    inv: &PhonemeInventory,
) -> Result<BiasingList> {
    const NEAREST_ROUNDS: usize = 3;

    let mut list = BiasingList::new(inv);
    let mut taken: HashSet<usize> = HashSet::new();
    for e in gt {
        list.push(e.clone())?;
        taken.insert(e.id);
    }

    // Per-GT nearest-neighbour rankings over the eligible pool.
    let rankings: Vec<Vec<usize>> = gt
        .iter()
        .map(|g| {
            let mut ranked: Vec<(usize, usize)> = distractor_pool
                .iter()
                .filter(|e| e.surface != g.surface)
                .map(|e| (edit_distance(&g.phonemes, &e.phonemes), e.id))
                .collect();
            ranked.sort();
            ranked.into_iter().map(|(_, id)| id).collect()
        })
        .collect();

    let by_id: BTreeMap<usize, &Entity> = distractor_pool.iter().map(|e| (e.id, e)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    'rounds: for _ in 0..NEAREST_ROUNDS {
        if rankings.is_empty() {
            break;
        }
        for ranking in &rankings {
            if chosen.len() == n_distractors {
                break 'rounds;
            }
            if let Some(&id) = ranking.iter().find(|id| !taken.contains(*id)) {
                taken.insert(id);
                chosen.push(id);
            }
        }
    }

    // Random fill from the remaining pool, ordered by id before shuffling
    // so the draw depends only on the seed.
    if chosen.len() < n_distractors {
        let mut remaining: Vec<usize> = by_id
            .keys()
            .copied()
            .filter(|id| !taken.contains(id))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        remaining.shuffle(&mut rng);
        for id in remaining {
            if chosen.len() == n_distractors {
                break;
            }
            chosen.push(id);
        }
    }

    for id in chosen {
        list.push(by_id[&id].clone())?;
    }
    Ok(list)
}
