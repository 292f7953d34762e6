//! Deterministic synthetic corpus generator.
//!
//! Entities come in homophone families built by single-phoneme
//! perturbations, so pairwise phoneme distance inside a family is 1–2.
//! Frame features are per-phoneme prototype vectors repeated a few times
//! plus Gaussian noise; family members share prototypes for their common
//! phonemes, so acoustics alone cannot reliably disambiguate them and the
//! biasing mechanism has to.

use crate::biasing::{BiasingList, Entity, EntitySpan};
use crate::error::{Error, Result};
use crate::phonology::{Lexicon, PhonemeInventory, PhonemeSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// All splits draw entities from the same inventory.
    Overlapping,
    /// Test utterances use families the training split never saw.
    Disjoint,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub phoneme_count: usize,
    pub token_vocab: usize,
    pub entity_count: usize,
    pub family_size: usize,
    pub utterance_len: (usize, usize),
    pub frames_per_phoneme: (usize, usize),
    pub noise_std: f64,
    pub feature_dim: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Chance that an utterance carries entities at all.
    pub entity_prob: f64,
    pub split_entities: SplitMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            phoneme_count: 40,
            token_vocab: 200,
            entity_count: 60,
            family_size: 3,
            utterance_len: (5, 12),
            frames_per_phoneme: (2, 4),
            noise_std: 0.3,
            feature_dim: 16,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            entity_prob: 0.9,
            split_entities: SplitMode::Overlapping,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("phoneme_count", self.phoneme_count),
            ("token_vocab", self.token_vocab),
            ("entity_count", self.entity_count),
            ("feature_dim", self.feature_dim),
            ("train_size", self.train_size),
            ("dev_size", self.dev_size),
            ("test_size", self.test_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.family_size < 2 {
            return Err(Error::contract(
                "family_size must be at least 2 so every entity has a homophone",
            ));
        }
        if self.entity_count % self.family_size != 0 {
            return Err(Error::contract(format!(
                "entity_count {} is not divisible by family_size {}",
                self.entity_count, self.family_size
            )));
        }
        if self.utterance_len.0 == 0 || self.utterance_len.0 > self.utterance_len.1 {
            return Err(Error::contract("bad utterance_len range"));
        }
        if self.frames_per_phoneme.0 == 0
            || self.frames_per_phoneme.0 > self.frames_per_phoneme.1
        {
            return Err(Error::contract("bad frames_per_phoneme range"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::contract("noise_std must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.entity_prob) {
            return Err(Error::contract("entity_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One synthetic utterance. `spans` carry global entity ids; consumers
/// remap them onto whatever biasing list is in use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    pub frames: Vec<Vec<f64>>,
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
}

/// A generated corpus with its shared resources.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Every entity, id-ordered, as one master biasing list.
    pub inventory: BiasingList,
    pub lexicon: Lexicon,
    pub phonemes: PhonemeInventory,
}

struct Generator {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    inv: PhonemeInventory,
    lexicon: Lexicon,
    filler_tokens: Vec<String>,
    entities: Vec<Entity>,
    proto_by_numeral: Vec<Vec<f64>>,
    // Parallel to the inventory. Symbols are interned in first-use order,
    // which is exactly the order `load_dir` reproduces from the lexicon
    // file, so index spaces agree between generation and reload.
    proto_by_index: Vec<Vec<f64>>,
    next_utt_id: usize,
}

impl Generator {
    fn new(cfg: SynthConfig) -> Result<Generator> {
        cfg.validate()?;
        let mut g = Generator {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            inv: PhonemeInventory::new(),
            lexicon: Lexicon::new(),
            filler_tokens: Vec::new(),
            entities: Vec::new(),
            proto_by_numeral: Vec::new(),
            proto_by_index: vec![Vec::new()], // reserved <nb> slot, never voiced
            next_utt_id: 0,
        };
        for _ in 0..g.cfg.phoneme_count {
            let proto: Vec<f64> = (0..g.cfg.feature_dim)
                .map(|_| StandardNormal.sample(&mut g.rng))
                .collect();
            g.proto_by_numeral.push(proto);
        }
        g.build_fillers()?;
        g.build_entities()?;
        Ok(g)
    }

    fn intern_numeral(&mut self, numeral: usize) -> usize {
        let before = self.inv.len();
        let idx = self.inv.intern(&format!("ph{numeral:02}"));
        if self.inv.len() > before {
            debug_assert_eq!(idx, self.proto_by_index.len());
            self.proto_by_index
                .push(self.proto_by_numeral[numeral].clone());
        }
        idx
    }

    fn random_phonemes(&mut self, len: usize) -> Vec<usize> {
        (0..len)
            .map(|_| {
                let numeral = self.rng.gen_range(0..self.cfg.phoneme_count);
                self.intern_numeral(numeral)
            })
            .collect()
    }

    fn build_fillers(&mut self) -> Result<()> {
        for i in 0..self.cfg.token_vocab {
            let token = format!("w{i:03}");
            let len = self.rng.gen_range(2..=3);
            let seq = self.random_phonemes(len);
            self.lexicon.insert(&token, PhonemeSequence::new(seq))?;
            self.filler_tokens.push(token);
        }
        Ok(())
    }

    fn build_entities(&mut self) -> Result<()> {
        let families = self.cfg.entity_count / self.cfg.family_size;
        let mut next_id = 1;
        for f in 0..families {
            let surface_len = self.rng.gen_range(2..=3);
            // Base member: fresh tokens with fresh phoneme sequences.
            let mut base_tokens = Vec::with_capacity(surface_len);
            let mut base_phonemes: Vec<Vec<usize>> = Vec::with_capacity(surface_len);
            for j in 0..surface_len {
                let token = format!("e{f}m0t{j}");
                let len = self.rng.gen_range(2..=3);
                let seq = self.random_phonemes(len);
                self.lexicon
                    .insert(&token, PhonemeSequence::new(seq.clone()))?;
                base_tokens.push(token);
                base_phonemes.push(seq);
            }
            let flat: Vec<usize> = base_phonemes.iter().flatten().copied().collect();
            self.entities.push(Entity::new(
                next_id,
                base_tokens.clone(),
                PhonemeSequence::new(flat),
            )?);
            next_id += 1;

            // Siblings: one phoneme of one token changed; everything else
            // (tokens and therefore prototypes) shared with the base.
            let mut used: Vec<(usize, usize, usize)> = Vec::new();
            for m in 1..self.cfg.family_size {
                let (tok_pos, ph_pos, replacement) = loop {
                    let tok_pos = self.rng.gen_range(0..surface_len);
                    let ph_pos = self.rng.gen_range(0..base_phonemes[tok_pos].len());
                    let numeral = self.rng.gen_range(0..self.cfg.phoneme_count);
                    let replacement = self.intern_numeral(numeral);
                    let key = (tok_pos, ph_pos, replacement);
                    if replacement != base_phonemes[tok_pos][ph_pos] && !used.contains(&key) {
                        break key;
                    }
                };
                used.push((tok_pos, ph_pos, replacement));

                let mut tokens = base_tokens.clone();
                let mut phonemes = base_phonemes.clone();
                phonemes[tok_pos][ph_pos] = replacement;
                let token = format!("e{f}m{m}t{tok_pos}");
                self.lexicon
                    .insert(&token, PhonemeSequence::new(phonemes[tok_pos].clone()))?;
                tokens[tok_pos] = token;
                let flat: Vec<usize> = phonemes.iter().flatten().copied().collect();
                self.entities
                    .push(Entity::new(next_id, tokens, PhonemeSequence::new(flat))?);
                next_id += 1;
            }
        }
        Ok(())
    }

    /// Entity ids an utterance of the given split may use.
    fn allowed_entities(&self, split: usize) -> Vec<usize> {
        match self.cfg.split_entities {
            SplitMode::Overlapping => (0..self.entities.len()).collect(),
            SplitMode::Disjoint => {
                let families = self.cfg.entity_count / self.cfg.family_size;
                let test_families = (families / 5).max(1);
                let cut = (families - test_families) * self.cfg.family_size;
                if split == 2 {
                    (cut..self.entities.len()).collect()
                } else {
                    (0..cut).collect()
                }
            }
        }
    }

    fn utterance(&mut self, split: usize) -> Utterance {
        let id = self.next_utt_id;
        self.next_utt_id += 1;

        let target_len = self
            .rng
            .gen_range(self.cfg.utterance_len.0..=self.cfg.utterance_len.1);
        let allowed = self.allowed_entities(split);
        let n_entities = if self.rng.gen_bool(self.cfg.entity_prob) {
            if self.rng.gen_bool(0.35) {
                2
            } else {
                1
            }
        } else {
            0
        };

        let mut picked: Vec<usize> = Vec::new();
        for _ in 0..n_entities {
            let e = allowed[self.rng.gen_range(0..allowed.len())];
            if !picked.contains(&e) {
                picked.push(e);
            }
        }

        let entity_tokens: usize = picked
            .iter()
            .map(|&e| self.entities[e].surface.len())
            .sum();
        let n_fillers = target_len.saturating_sub(entity_tokens).max(1);
        let mut tokens: Vec<String> = (0..n_fillers)
            .map(|_| {
                let i = self.rng.gen_range(0..self.filler_tokens.len());
                self.filler_tokens[i].clone()
            })
            .collect();

        let mut spans: Vec<EntitySpan> = Vec::new();
        for &e in &picked {
            let surface = self.entities[e].surface.clone();
            // Insertion points strictly inside an existing span would
            // split that entity; redraw until the point is clear.
            let at = loop {
                let at = self.rng.gen_range(0..=tokens.len());
                if spans.iter().all(|s| at <= s.start || at >= s.end) {
                    break at;
                }
            };
            let len = surface.len();
            for (ofs, t) in surface.into_iter().enumerate() {
                tokens.insert(at + ofs, t);
            }
            // Earlier spans shift right when inserting before them.
            for s in spans.iter_mut() {
                if s.start >= at {
                    s.start += len;
                    s.end += len;
                }
            }
            spans.push(EntitySpan {
                start: at,
                end: at + len,
                bias_id: self.entities[e].id,
            });
        }
        spans.sort_by_key(|s| s.start);

        let mut frames: Vec<Vec<f64>> = Vec::new();
        for t in &tokens {
            let seq = self.lexicon.get(t).expect("generated token in lexicon");
            for &ph in seq.as_slice() {
                let reps = self
                    .rng
                    .gen_range(self.cfg.frames_per_phoneme.0..=self.cfg.frames_per_phoneme.1);
                for _ in 0..reps {
                    let frame: Vec<f64> = self.proto_by_index[ph]
                        .iter()
                        .map(|&base| {
                            let noise: f64 = StandardNormal.sample(&mut self.rng);
                            base + self.cfg.noise_std * noise
                        })
                        .collect();
                    frames.push(frame);
                }
            }
        }

        Utterance {
            id,
            frames,
            tokens,
            spans,
        }
    }
}

/// Generates train/dev/test corpora plus the entity inventory and the
/// lexicon, fully determined by the seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    let mut g = Generator::new(cfg.clone())?;
    let train: Vec<Utterance> = (0..g.cfg.train_size).map(|_| g.utterance(0)).collect();
    let dev: Vec<Utterance> = (0..g.cfg.dev_size).map(|_| g.utterance(1)).collect();
    let test: Vec<Utterance> = (0..g.cfg.test_size).map(|_| g.utterance(2)).collect();

    let mut inventory = BiasingList::new(&g.inv);
    for e in &g.entities {
        inventory.push(e.clone())?;
    }
    Ok(SynthOutput {
        train,
        dev,
        test,
        inventory,
        lexicon: g.lexicon,
        phonemes: g.inv,
    })
}

// ── corpus files ────────────────────────────────────────────────────

/// Writes utterances as JSON lines.
pub fn write_jsonl(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in utterances {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// On-disk layout of a generated data directory.
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const ENTITIES_FILE: &str = "entities.tsv";

impl SynthOutput {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(DEV_FILE), &self.dev)?;
        write_jsonl(&dir.join(TEST_FILE), &self.test)?;
        self.lexicon.save(&dir.join(LEXICON_FILE), &self.phonemes)?;
        self.inventory.save(&dir.join(ENTITIES_FILE), &self.phonemes)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<SynthOutput> {
        let mut phonemes = PhonemeInventory::new();
        let lexicon = Lexicon::load(&dir.join(LEXICON_FILE), &mut phonemes)?;
        let inventory = BiasingList::load(&dir.join(ENTITIES_FILE), &phonemes)?;
        Ok(SynthOutput {
            train: read_jsonl(&dir.join(TRAIN_FILE))?,
            dev: read_jsonl(&dir.join(DEV_FILE))?,
            test: read_jsonl(&dir.join(TEST_FILE))?,
            inventory,
            lexicon,
            phonemes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonology::edit_distance;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            phoneme_count: 12,
            token_vocab: 20,
            entity_count: 9,
            family_size: 3,
            train_size: 20,
            dev_size: 5,
            test_size: 5,
            feature_dim: 4,
            seed: 77,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        let sa = serde_json::to_string(&a.train).unwrap();
        let sb = serde_json::to_string(&b.train).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn families_give_near_homophones() {
        let out = generate(&small_cfg()).unwrap();
        // Every entity has at least family_size - 1 pool members within
        // phoneme distance 2.
        for e in out.inventory.entries().iter().skip(1) {
            let near = out
                .inventory
                .entries()
                .iter()
                .skip(1)
                .filter(|o| o.id != e.id && edit_distance(&e.phonemes, &o.phonemes) <= 2)
                .count();
            assert!(near >= 2, "entity {} has only {near} near homophones", e.id);
        }
    }

    #[test]
    fn zero_noise_repeats_prototype_frames() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small_cfg()
        };
        let out = generate(&cfg).unwrap();
        for u in &out.train {
            // Runs of identical consecutive frames must line up with the
            // utterance's phoneme sequence after collapsing consecutive
            // duplicate phonemes, and each phoneme must keep one vector.
            let mut phoneme_seq: Vec<usize> = Vec::new();
            for t in &u.tokens {
                phoneme_seq.extend_from_slice(out.lexicon.get(t).unwrap().as_slice());
            }
            phoneme_seq.dedup();

            let mut runs: Vec<&Vec<f64>> = Vec::new();
            for f in &u.frames {
                if runs.last().map(|r| *r != f).unwrap_or(true) {
                    runs.push(f);
                }
            }
            assert_eq!(runs.len(), phoneme_seq.len(), "utterance {}", u.id);

            let mut by_phoneme: std::collections::HashMap<usize, &Vec<f64>> =
                std::collections::HashMap::new();
            for (ph, frame) in phoneme_seq.iter().zip(&runs) {
                match by_phoneme.get(ph) {
                    Some(existing) => assert_eq!(existing, frame),
                    None => {
                        by_phoneme.insert(*ph, frame);
                    }
                }
            }
        }
    }

    #[test]
    fn spans_are_valid_and_in_inventory() {
        let out = generate(&small_cfg()).unwrap();
        for split in [&out.train, &out.dev, &out.test] {
            for u in split {
                let mut covered = vec![false; u.tokens.len()];
                for s in &u.spans {
                    assert!(s.start < s.end && s.end <= u.tokens.len());
                    for pos in s.start..s.end {
                        assert!(!covered[pos], "overlapping spans in {}", u.id);
                        covered[pos] = true;
                    }
                    let idx = out.inventory.index_of_entity_id(s.bias_id).unwrap();
                    assert_eq!(
                        out.inventory.entry(idx).surface[..],
                        u.tokens[s.start..s.end]
                    );
                }
            }
        }
    }

    #[test]
    fn frame_counts_match_phoneme_repetitions() {
        let cfg = small_cfg();
        let out = generate(&cfg).unwrap();
        for u in &out.train {
            let phonemes: usize = u
                .tokens
                .iter()
                .map(|t| out.lexicon.get(t).unwrap().len())
                .sum();
            assert!(u.frames.len() >= phonemes * cfg.frames_per_phoneme.0);
            assert!(u.frames.len() <= phonemes * cfg.frames_per_phoneme.1);
            for f in &u.frames {
                assert_eq!(f.len(), cfg.feature_dim);
            }
        }
    }

    #[test]
    fn disjoint_mode_separates_test_entities() {
        let cfg = SynthConfig {
            split_entities: SplitMode::Disjoint,
            ..small_cfg()
        };
        let out = generate(&cfg).unwrap();
        let train_ids: std::collections::HashSet<usize> = out
            .train
            .iter()
            .flat_map(|u| u.spans.iter().map(|s| s.bias_id))
            .collect();
        let test_ids: std::collections::HashSet<usize> = out
            .test
            .iter()
            .flat_map(|u| u.spans.iter().map(|s| s.bias_id))
            .collect();
        assert!(train_ids.is_disjoint(&test_ids));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SynthConfig {
            entity_count: 10,
            family_size: 3,
            ..small_cfg()
        };
        assert!(generate(&cfg).is_err());
        let cfg = SynthConfig {
            family_size: 1,
            entity_count: 4,
            ..small_cfg()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let out = generate(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write_dir(dir.path()).unwrap();
        let loaded = SynthOutput::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.train, out.train);
        assert_eq!(loaded.test, out.test);
        assert_eq!(loaded.inventory.len(), out.inventory.len());
        for (a, b) in out.inventory.entries().iter().zip(loaded.inventory.entries()) {
            assert_eq!(a, b);
        }
    }
}
