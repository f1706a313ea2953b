use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, BOS, COLOR, DESCRIBE, EOS};
use super::GridImage;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "mmkd-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Grid enumeration is only attempted below this many distinct grids.
const MAX_ENUMERABLE: u128 = 1 << 22;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub grid_k: usize,
    pub palette_size: usize,
    pub image_size: usize,
    pub pretrain: usize,
    pub finetune: usize,
    pub eval: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid_k: 3,
            palette_size: 6,
            image_size: 24,
            pretrain: 2000,
            finetune: 2000,
            eval: 500,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.palette_size < 2 {
            return Err(Error::Config(format!(
                "palette size must be at least 2, got {}",
                self.palette_size
            )));
        }
        Vocab::new(self.grid_k, self.palette_size)?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.grid_k) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of grid size {}",
                self.image_size, self.grid_k
            )));
        }
        if self.pretrain == 0 || self.finetune == 0 || self.eval == 0 {
            return Err(Error::Config(
                "every split needs at least one sample".into(),
            ));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::Finetune => self.finetune,
            Split::Eval => self.eval,
        }
    }

    /// Number of distinct grids, saturating.
    pub fn grid_capacity(&self) -> u128 {
        let cells = (self.grid_k * self.grid_k) as u32;
        (self.palette_size as u128)
            .checked_pow(cells)
            .unwrap_or(u128::MAX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Caption samples.
    Pretrain,
    /// Question/answer samples.
    Finetune,
    /// Held-out question/answer samples.
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Pretrain, Split::Finetune, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Eval => "eval",
        }
    }

    pub fn is_caption(self) -> bool {
        self == Split::Pretrain
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub split: Split,
    pub grid: GridImage,
    /// Cell asked about, for question samples.
    pub query: Option<(usize, usize)>,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// Prompt for a caption (`query == None`) or a cell question.
pub fn prompt_for(vocab: &Vocab, query: Option<(usize, usize)>) -> Vec<TokenId> {
    match query {
        None => vec![BOS, vocab.id(DESCRIBE).expect("fixed word")],
        Some((r, c)) => vec![
            BOS,
            vocab.id(COLOR).expect("fixed word"),
            vocab.digit(r),
            vocab.digit(c),
        ],
    }
}

/// The reference response: every cell row-major for captions, the single
/// queried color otherwise; both end with `<eos>`.
pub fn rule_response(
    vocab: &Vocab,
    grid: &GridImage,
    query: Option<(usize, usize)>,
) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = match query {
        None => grid.cells.iter().map(|&c| vocab.color(c)).collect(),
        Some((r, c)) => vec![vocab.color(grid.cell(r, c))],
    };
    out.push(EOS);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    config: DataConfig,
    vocab: Vocab,
    splits: HashMap<Split, Vec<Sample>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: DataConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    split: Split,
    cells: Vec<u8>,
    prompt: String,
    response: String,
}

impl Dataset {
    /// Deterministic generation from `config.seed`. No grid appears in more
    /// than one split; questions cycle over every cell.
    pub fn generate(config: &DataConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(config.grid_k, config.palette_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let grids = allocate_grids(config, &mut rng)?;

        let mut splits = HashMap::new();
        for (split, pool) in Split::ALL.into_iter().zip(grids) {
            let n = config.size(split);
            let cells = config.grid_k * config.grid_k;
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                let grid = pool[i % pool.len()].clone();
                let query = (!split.is_caption()).then(|| {
                    let cell = i % cells;
                    (cell / config.grid_k, cell % config.grid_k)
                });
                samples.push(Sample {
                    split,
                    prompt: prompt_for(&vocab, query),
                    response: rule_response(&vocab, &grid, query),
                    grid,
                    query,
                });
            }
            // Decouple question position from grid order.
            if !split.is_caption() {
                samples.shuffle(&mut rng);
            }
            splits.insert(split, samples);
        }
        Ok(Dataset {
            config: config.clone(),
            vocab,
            splits,
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    /// Writes the dataset as line-delimited JSON: a header line followed by
    /// one record per sample.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for split in Split::ALL {
            for s in self.split(split) {
                let rec = Record {
                    split,
                    cells: s.grid.cells.clone(),
                    prompt: self.vocab.detokenize(&s.prompt)?,
                    response: self.vocab.detokenize(&s.response)?,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Reads and validates a dataset written by [`Dataset::write_to`].
    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Dataset("empty dataset file".into()))?;
        let header: Header = serde_json::from_str(&first?)
            .map_err(|e| Error::Dataset(format!("line 1: bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Dataset(format!(
                "line 1: unknown format {:?}",
                header.format
            )));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Dataset(format!(
                "line 1: version {} (expected {DATASET_VERSION})",
                header.version
            )));
        }
        let config = header.config;
        config.validate()?;
        let vocab = Vocab::new(config.grid_k, config.palette_size)?;

        let mut splits: HashMap<Split, Vec<Sample>> = HashMap::new();
        let mut owner: HashMap<Vec<u8>, Split> = HashMap::new();
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            let bad = |msg: String| Error::Dataset(format!("line {lineno}: {msg}"));
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let grid = GridImage::new(config.grid_k, rec.cells).map_err(|e| bad(e.to_string()))?;
            if let Some(&c) = grid
                .cells
                .iter()
                .find(|&&c| c as usize >= config.palette_size)
            {
                return Err(bad(format!(
                    "color {c} outside palette of {}",
                    config.palette_size
                )));
            }
            let prompt = vocab
                .tokenize(&rec.prompt)
                .map_err(|e| bad(e.to_string()))?;
            let response = vocab
                .tokenize(&rec.response)
                .map_err(|e| bad(e.to_string()))?;
            let query = parse_query(&vocab, &prompt).map_err(|e| bad(e.to_string()))?;
            if query.is_some() == rec.split.is_caption() {
                return Err(bad(format!(
                    "prompt kind does not match split {}",
                    rec.split
                )));
            }
            if response != rule_response(&vocab, &grid, query) {
                return Err(bad("response does not match the grid".into()));
            }
            match owner.get(&grid.cells) {
                Some(&s) if s != rec.split => {
                    return Err(bad(format!("grid also appears in split {s}")));
                }
                _ => {
                    owner.insert(grid.cells.clone(), rec.split);
                }
            }
            splits.entry(rec.split).or_default().push(Sample {
                split: rec.split,
                grid,
                query,
                prompt,
                response,
            });
        }
        for split in Split::ALL {
            let got = splits.get(&split).map_or(0, Vec::len);
            if got != config.size(split) {
                return Err(Error::Dataset(format!(
                    "split {split} has {got} samples, header declares {}",
                    config.size(split)
                )));
            }
        }
        Ok(Dataset {
            config,
            vocab,
            splits,
        })
    }
}

fn parse_query(vocab: &Vocab, prompt: &[TokenId]) -> Result<Option<(usize, usize)>> {
    if prompt == prompt_for(vocab, None).as_slice() {
        return Ok(None);
    }
    if let [b, c, r, col] = prompt {
        if *b == BOS && Some(*c) == vocab.id(COLOR) {
            if let (Some(r), Some(col)) = (vocab.digit_value(*r), vocab.digit_value(*col)) {
                return Ok(Some((r, col)));
            }
        }
    }
    Err(Error::Dataset(format!(
        "unrecognised prompt {:?}",
        vocab.detokenize(prompt).unwrap_or_default()
    )))
}

/// Disjoint grid pools, one per split (in `Split::ALL` order).
fn allocate_grids(config: &DataConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<GridImage>>> {
    let capacity = config.grid_capacity();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&s| config.size(s)).collect();
    let total: usize = sizes.iter().sum();
    let k = config.grid_k;
    let cells = k * k;

    if capacity >= 2 * total as u128 {
        let mut seen = HashSet::new();
        let mut pools = Vec::new();
        for &n in &sizes {
            let mut pool = Vec::with_capacity(n);
            while pool.len() < n {
                let g: Vec<u8> = (0..cells)
                    .map(|_| rng.random_range(0..config.palette_size as u8))
                    .collect();
                if seen.insert(g.clone()) {
                    pool.push(GridImage { k, cells: g });
                }
            }
            pools.push(pool);
        }
        return Ok(pools);
    }

    if capacity < Split::ALL.len() as u128 || capacity > MAX_ENUMERABLE {
        return Err(Error::Config(format!(
            "{capacity} distinct grids cannot be split into {total} samples"
        )));
    }
    let capacity = capacity as usize;
    let mut all: Vec<GridImage> = (0..capacity)
        .map(|mut code| {
            let mut g = vec![0u8; cells];
            for c in g.iter_mut().rev() {
                *c = (code % config.palette_size) as u8;
                code /= config.palette_size;
            }
            GridImage { k, cells: g }
        })
        .collect();
    all.shuffle(rng);

    // Proportional share, at least one grid each.
    let mut shares: Vec<usize> = sizes
        .iter()
        .map(|&n| (capacity * n / total).clamp(1, n))
        .collect();
    while shares.iter().sum::<usize>() > capacity {
        let i = (0..shares.len())
            .max_by_key(|&i| shares[i])
            .expect("non-empty");
        shares[i] -= 1;
    }
    let mut pools = Vec::new();
    let mut it = all.into_iter();
    for share in shares {
        pools.push(it.by_ref().take(share).collect());
    }
    Ok(pools)
}
