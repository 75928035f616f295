//! Synthetic social-navigation scenes with rule-derived labels.

use crate::error::{Error, Result};
use crate::metrics::{EvalSample, OutputFormat};
use crate::model::{Sequence, VocabSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const GENERATOR_VERSION: &str = "nav-grid/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Free,
    Obstacle,
    Pedestrian,
    Door,
    Goal,
    Robot,
}

impl Cell {
    pub const ALL: [Cell; 6] = [Cell::Free, Cell::Obstacle, Cell::Pedestrian, Cell::Door, Cell::Goal, Cell::Robot];

    pub fn code(self) -> usize {
        Cell::ALL.iter().position(|&c| c == self).unwrap()
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP_PERCEPTION: usize = 3;
pub const SEP_REASONING: usize = 4;
pub const VISUAL_OFFSET: usize = 8;
pub const WORD_OFFSET: usize = 16;
pub const VOCAB_SIZE: usize = 128;

const PROMPTS: [&str; 4] = [
    "what should the robot do next",
    "describe the scene and choose an action",
    "how should the robot move toward the goal",
    "plan the next move for the robot",
];

const NUMBERS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

const PHRASES: [&str; 20] = [
    "stop and wait",
    "yield right",
    "yield left",
    "go around left",
    "go around right",
    "slow down through the door",
    "turn left",
    "turn right",
    "proceed straight",
    "i see pedestrians obstacles and doors",
    "the goal is to the left right straight ahead",
    "a pedestrian is directly ahead",
    "a pedestrian is in my lane",
    "an obstacle is directly ahead",
    "a door is on my path",
    "the path is clear",
    "the pedestrian is too close so i must for them to pass",
    "walks in my lane so i keep to the side where there is more space",
    "blocks the lane so i pass it on the toward goal",
    "people may come out of so move slowly way",
];

/// Every word the generator can emit, in a fixed order.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    for text in PROMPTS.iter().chain(&NUMBERS).chain(&PHRASES) {
        for w in text.split_whitespace() {
            if !words.contains(&w) {
                words.push(w);
            }
        }
    }
    words
}

/// Token layout and output format shared by all navigation runs.
#[derive(Clone, Debug, PartialEq)]
pub struct NavVocab {
    pub spec: VocabSpec,
    pub format: OutputFormat,
    words: Vec<&'static str>,
}

impl NavVocab {
    pub fn new() -> Result<Self> {
        let words = lexicon();
        if WORD_OFFSET + words.len() > VOCAB_SIZE {
            return Err(Error::Config(format!("lexicon of {} words does not fit the vocabulary", words.len())));
        }
        let spec = VocabSpec {
            size: VOCAB_SIZE,
            pad: PAD,
            bos: BOS,
            eos: EOS,
            visual_offset: VISUAL_OFFSET,
            visual_count: Cell::ALL.len(),
        };
        spec.validate()?;
        Ok(Self {
            spec,
            format: OutputFormat {
                sep_perception: SEP_PERCEPTION,
                sep_reasoning: SEP_REASONING,
                eos: EOS,
            },
            words,
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.words
                    .iter()
                    .position(|x| *x == w)
                    .map(|i| WORD_OFFSET + i)
                    .ok_or_else(|| Error::Input(format!("word {w:?} is not in the lexicon")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD => "<pad>".to_string(),
                BOS => "<bos>".to_string(),
                EOS => "<eos>".to_string(),
                SEP_PERCEPTION => "|".to_string(),
                SEP_REASONING => "||".to_string(),
                _ if self.spec.is_visual(id) => format!("<{:?}>", Cell::ALL[id - VISUAL_OFFSET]).to_lowercase(),
                _ => self
                    .words
                    .get(id.wrapping_sub(WORD_OFFSET))
                    .map(|w| w.to_string())
                    .unwrap_or_else(|| format!("<{id}>")),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Knobs for [`gen_dataset`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub grid_size: usize,
    pub min_pedestrians: usize,
    pub max_pedestrians: usize,
    pub min_obstacles: usize,
    pub max_obstacles: usize,
    pub max_doors: usize,
    /// Prompt variants emitted per scene.
    pub multiplicity: usize,
    pub max_retries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 256,
            n_test: 64,
            grid_size: 6,
            min_pedestrians: 0,
            max_pedestrians: 3,
            min_obstacles: 0,
            max_obstacles: 4,
            max_doors: 1,
            multiplicity: 1,
            max_retries: 100,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_test < 1 {
            return Err(Error::Config("dataset counts must be at least 1".into()));
        }
        if self.grid_size < 3 || self.grid_size > 9 {
            return Err(Error::Config(format!("grid size {} outside 3..=9", self.grid_size)));
        }
        if self.min_pedestrians > self.max_pedestrians || self.min_obstacles > self.max_obstacles {
            return Err(Error::Config("minimum object count exceeds maximum".into()));
        }
        if self.max_pedestrians > 9 || self.max_obstacles > 9 || self.max_doors > 9 {
            return Err(Error::Config("at most nine objects of each kind".into()));
        }
        if self.multiplicity < 1 || self.multiplicity > PROMPTS.len() {
            return Err(Error::Config(format!("multiplicity must be in 1..={}", PROMPTS.len())));
        }
        Ok(())
    }
}

/// One labelled scene (one prompt variant).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub scene: usize,
    pub grid: Vec<Vec<Cell>>,
    pub prompt_text: String,
    pub action_text: String,
    pub perception_text: String,
    pub reasoning_text: String,
    pub prompt: Vec<usize>,
    pub action: Vec<usize>,
    pub perception: Vec<usize>,
    pub reasoning: Vec<usize>,
}

impl Scenario {
    pub fn visual_tokens(&self) -> Vec<usize> {
        self.grid.iter().flatten().map(|c| VISUAL_OFFSET + c.code()).collect()
    }

    pub fn target(&self, vocab: &NavVocab) -> Vec<usize> {
        vocab.format.compose(&self.action, &self.perception, &self.reasoning)
    }

    pub fn to_sequence(&self, vocab: &NavVocab) -> Sequence {
        Sequence {
            id: self.id.clone(),
            visual: self.visual_tokens(),
            text: self.prompt.clone(),
            target: self.target(vocab),
        }
    }

    pub fn to_eval_sample(&self) -> EvalSample {
        let mut prompt = vec![BOS];
        prompt.extend(self.visual_tokens());
        prompt.extend(&self.prompt);
        EvalSample {
            id: self.id.clone(),
            prompt,
            action: self.action.clone(),
            perception: self.perception.clone(),
            reasoning: self.reasoning.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub config: DataConfig,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// SHA-256 of the train file bytes followed by the test file bytes.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scenario>,
    pub test: Vec<Scenario>,
    pub manifest: DatasetManifest,
}

/// Label texts for a grid, by fixed priority rules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub action: String,
    pub perception: String,
    pub reasoning: String,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

impl Side {
    fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

fn find(grid: &[Vec<Cell>], cell: Cell) -> Option<(usize, usize)> {
    grid.iter()
        .enumerate()
        .find_map(|(r, row)| row.iter().position(|&c| c == cell).map(|c| (r, c)))
}

fn count(grid: &[Vec<Cell>], cell: Cell) -> usize {
    grid.iter().flatten().filter(|&&c| c == cell).count()
}

/// Free-ish cells (not obstacle or pedestrian) in column `col` above the robot row.
fn column_space(grid: &[Vec<Cell>], col: isize) -> isize {
    let n = grid.len();
    if col < 0 || col as usize >= n {
        return -1;
    }
    (0..n - 1)
        .filter(|&r| !matches!(grid[r][col as usize], Cell::Obstacle | Cell::Pedestrian))
        .count() as isize
}

/// Applies the labelling rules to a grid holding one robot and one goal.
pub fn label(grid: &[Vec<Cell>]) -> Result<Labels> {
    if count(grid, Cell::Robot) != 1 || count(grid, Cell::Goal) != 1 {
        return Err(Error::Input("grid needs exactly one robot and one goal".into()));
    }
    let (rr, rc) = find(grid, Cell::Robot).unwrap();
    let (_, gc) = find(grid, Cell::Goal).unwrap();
    if rr == 0 {
        return Err(Error::Input("robot must not start in the top row".into()));
    }
    let ahead = grid[rr - 1][rc];
    let lane: Vec<Cell> = (0..rr - 1).map(|r| grid[r][rc]).collect();
    let goal_dir = match gc.cmp(&rc) {
        std::cmp::Ordering::Less => "to the left",
        std::cmp::Ordering::Greater => "to the right",
        std::cmp::Ordering::Equal => "straight ahead",
    };
    let roomier = || {
        let l = column_space(grid, rc as isize - 1);
        let r = column_space(grid, rc as isize + 1);
        if l > r {
            Side::Left
        } else {
            Side::Right
        }
    };
    let (action, key, reasoning) = if ahead == Cell::Pedestrian {
        (
            "stop and wait".to_string(),
            "a pedestrian is directly ahead",
            "the pedestrian is too close so i must stop and wait for them to pass".to_string(),
        )
    } else if lane.contains(&Cell::Pedestrian) {
        let side = roomier();
        (
            format!("yield {}", side.word()),
            "a pedestrian is in my lane",
            format!(
                "the pedestrian walks in my lane so i keep to the {} side where there is more space",
                side.word()
            ),
        )
    } else if ahead == Cell::Obstacle {
        let side = match gc.cmp(&rc) {
            std::cmp::Ordering::Less => Side::Left,
            std::cmp::Ordering::Greater => Side::Right,
            std::cmp::Ordering::Equal => roomier(),
        };
        (
            format!("go around {}", side.word()),
            "an obstacle is directly ahead",
            format!("the obstacle blocks the lane so i pass it on the {} toward the goal", side.word()),
        )
    } else if ahead == Cell::Door || lane.contains(&Cell::Door) {
        (
            "slow down through the door".to_string(),
            "a door is on my path",
            "people may come out of the door so i move slowly".to_string(),
        )
    } else {
        let action = match gc.cmp(&rc) {
            std::cmp::Ordering::Less => "turn left",
            std::cmp::Ordering::Greater => "turn right",
            std::cmp::Ordering::Equal => "proceed straight",
        };
        (
            action.to_string(),
            "the path is clear",
            format!("the goal is {goal_dir} and the way is clear"),
        )
    };
    let perception = format!(
        "i see {} pedestrians {} obstacles and {} doors {key} the goal is {goal_dir}",
        NUMBERS[count(grid, Cell::Pedestrian).min(9)],
        NUMBERS[count(grid, Cell::Obstacle).min(9)],
        NUMBERS[count(grid, Cell::Door).min(9)],
    );
    Ok(Labels {
        action,
        perception,
        reasoning,
    })
}

fn random_grid(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<Cell>>> {
    let n = cfg.grid_size;
    let mut grid = vec![vec![Cell::Free; n]; n];
    let rc = n / 2;
    grid[n - 1][rc] = Cell::Robot;
    grid[0][rng.gen_range(0..n)] = Cell::Goal;
    let mut free: Vec<(usize, usize)> = (0..n)
        .flat_map(|r| (0..n).map(move |c| (r, c)))
        .filter(|&(r, c)| grid[r][c] == Cell::Free)
        .collect();
    free.shuffle(rng);
    let wanted = [
        (Cell::Pedestrian, rng.gen_range(cfg.min_pedestrians..=cfg.max_pedestrians)),
        (Cell::Obstacle, rng.gen_range(cfg.min_obstacles..=cfg.max_obstacles)),
        (Cell::Door, rng.gen_range(0..=cfg.max_doors)),
    ];
    if wanted.iter().map(|w| w.1).sum::<usize>() > free.len() {
        return None;
    }
    let mut slots = free.into_iter();
    for (cell, k) in wanted {
        for _ in 0..k {
            let (r, c) = slots.next()?;
            grid[r][c] = cell;
        }
    }
    Some(grid)
}

fn scene(cfg: &DataConfig, vocab: &NavVocab, rng: &mut ChaCha8Rng, index: usize, split: &str) -> Result<Vec<Scenario>> {
    let mut attempts = 0;
    let grid = loop {
        attempts += 1;
        if let Some(g) = random_grid(cfg, rng) {
            break g;
        }
        if attempts >= cfg.max_retries {
            return Err(Error::Generation(format!(
                "scene {split}-{index}: no valid grid after {attempts} retries (grid {}x{}, up to {} pedestrians, {} obstacles)",
                cfg.grid_size, cfg.grid_size, cfg.max_pedestrians, cfg.max_obstacles
            )));
        }
    };
    let labels = label(&grid)?;
    let mut variants: Vec<usize> = (0..PROMPTS.len()).collect();
    variants.shuffle(rng);
    variants
        .into_iter()
        .take(cfg.multiplicity)
        .enumerate()
        .map(|(k, p)| {
            Ok(Scenario {
                id: format!("{split}-{index:05}-{k}"),
                scene: index,
                grid: grid.clone(),
                prompt_text: PROMPTS[p].to_string(),
                action_text: labels.action.clone(),
                perception_text: labels.perception.clone(),
                reasoning_text: labels.reasoning.clone(),
                prompt: vocab.encode(PROMPTS[p])?,
                action: vocab.encode(&labels.action)?,
                perception: vocab.encode(&labels.perception)?,
                reasoning: vocab.encode(&labels.reasoning)?,
            })
        })
        .collect()
}

fn jsonl(rows: &[Scenario]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn checksum(train: &[u8], test: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(train);
    h.update(test);
    format!("{:x}", h.finalize())
}

/// Deterministic train/test scenes; identical configs give identical files.
pub fn gen_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = NavVocab::new()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    for i in 0..cfg.n_train {
        train.extend(scene(cfg, &vocab, &mut rng, i, "train")?);
    }
    let mut test = Vec::new();
    for i in 0..cfg.n_test {
        test.extend(scene(cfg, &vocab, &mut rng, i, "test")?);
    }
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.to_string(),
        seed: cfg.seed,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        config: cfg.clone(),
        train_ids: train.iter().map(|s| s.id.clone()).collect(),
        test_ids: test.iter().map(|s| s.id.clone()).collect(),
        checksum: checksum(&jsonl(&train)?, &jsonl(&test)?),
    };
    Ok(Dataset { train, test, manifest })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("train.jsonl"), jsonl(&ds.train)?)?;
    std::fs::write(dir.join("test.jsonl"), jsonl(&ds.test)?)?;
    let mut m = serde_json::to_vec_pretty(&ds.manifest)?;
    m.push(b'\n');
    std::fs::write(dir.join("manifest.json"), m)?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<(Vec<Scenario>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let rows = bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    Ok((rows, bytes))
}

/// Loads a dataset directory and checks it against its manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let (train, tb) = read_jsonl(&dir.join("train.jsonl"))?;
    let (test, sb) = read_jsonl(&dir.join("test.jsonl"))?;
    if checksum(&tb, &sb) != manifest.checksum {
        return Err(Error::Config(format!("dataset in {} does not match its manifest checksum", dir.display())));
    }
    let ids = |v: &[Scenario]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    if ids(&train) != manifest.train_ids || ids(&test) != manifest.test_ids {
        return Err(Error::Config("dataset ids differ from the manifest".into()));
    }
    Ok(Dataset { train, test, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_fits() {
        let v = NavVocab::new().unwrap();
        assert!(WORD_OFFSET + lexicon().len() <= VOCAB_SIZE);
        let ids = v.encode("stop and wait").unwrap();
        assert_eq!(v.decode(&ids), "stop and wait");
    }

    #[test]
    fn pedestrian_ahead_forces_stop() {
        let mut g = vec![vec![Cell::Free; 5]; 5];
        g[4][2] = Cell::Robot;
        g[0][4] = Cell::Goal;
        g[3][2] = Cell::Pedestrian;
        let l = label(&g).unwrap();
        assert_eq!(l.action, "stop and wait");
        assert!(l.perception.starts_with("i see one pedestrians zero obstacles"));
    }

    #[test]
    fn pedestrian_in_lane_yields_to_roomier_side() {
        let mut g = vec![vec![Cell::Free; 5]; 5];
        g[4][2] = Cell::Robot;
        g[0][2] = Cell::Goal;
        g[1][2] = Cell::Pedestrian;
        g[2][3] = Cell::Obstacle;
        assert_eq!(label(&g).unwrap().action, "yield left");
    }
}
