use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use consinstancy::synthdata::{generate_split, DatasetManifest, SceneMode, SceneSpec};
use serde::{Deserialize, Serialize};

use crate::{data_root, load_config, set_if, write_effective, UsageError};

pub const TRAIN_MANIFEST: &str = "train.json";
pub const TEST_MANIFEST: &str = "test.json";

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $CONSINSTANCY_DATA_DIR or ./data]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub unlabeled: Option<usize>,
    /// Labelled scenes in the separate test split.
    #[arg(long)]
    pub test_labeled: Option<usize>,
    /// sedimentation or fresh
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SceneMode>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub adjacency_prob: Option<f64>,
}

pub fn parse_mode(s: &str) -> std::result::Result<SceneMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "sedimentation" => Ok(SceneMode::Sedimentation),
        "fresh" => Ok(SceneMode::Fresh),
        _ => Err(format!("unknown mode {s:?} (expected sedimentation or fresh)")),
    }
}

/// Scene parameters that replace the preset's values when set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOverrides {
    pub particle_count_range: Option<[usize; 2]>,
    pub radius_range: Option<[f64; 2]>,
    pub adjacency_prob: Option<f64>,
    pub boundary_softness: Option<f64>,
    pub noise_std: Option<f64>,
    pub texture_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub out_dir: PathBuf,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test_labeled: usize,
    pub mode: SceneMode,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scene: SceneOverrides,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            out_dir: data_root(),
            labeled: 17,
            unlabeled: 200,
            test_labeled: 50,
            mode: SceneMode::Sedimentation,
            height: 64,
            width: 64,
            seed: 0,
            scene: SceneOverrides::default(),
        }
    }
}

impl GenerateConfig {
    pub fn resolve(a: GenerateArgs) -> Result<Self> {
        let mut c: GenerateConfig = load_config(a.config.as_deref())?;
        set_if!(c.out_dir, a.out);
        set_if!(c.labeled, a.labeled);
        set_if!(c.unlabeled, a.unlabeled);
        set_if!(c.test_labeled, a.test_labeled);
        set_if!(c.mode, a.mode);
        set_if!(c.height, a.height);
        set_if!(c.width, a.width);
        set_if!(c.seed, a.seed);
        if a.adjacency_prob.is_some() {
            c.scene.adjacency_prob = a.adjacency_prob;
        }
        Ok(c)
    }

    /// The train split's scene spec; the test split continues the seed
    /// sequence after the last training scene.
    pub fn spec(&self) -> SceneSpec {
        let mut s = SceneSpec::preset(self.mode, self.height, self.width, self.seed);
        let o = &self.scene;
        set_if!(s.particle_count_range, o.particle_count_range);
        set_if!(s.radius_range, o.radius_range);
        set_if!(s.adjacency_prob, o.adjacency_prob);
        set_if!(s.boundary_softness, o.boundary_softness);
        set_if!(s.noise_std, o.noise_std);
        set_if!(s.texture_scale, o.texture_scale);
        s
    }

    pub fn test_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed + (self.labeled + self.unlabeled) as u64,
            ..self.spec()
        }
    }
}

pub struct Generated {
    pub train: DatasetManifest,
    pub test: Option<DatasetManifest>,
}

pub fn run(c: &GenerateConfig) -> Result<Generated> {
    if c.labeled + c.unlabeled == 0 {
        return Err(UsageError("the train split would be empty; pass --labeled or --unlabeled".into()).into());
    }
    write_effective(&c.out_dir, c)?;
    let train = generate_split(&c.spec(), c.labeled, c.unlabeled, &c.out_dir, "train")?;
    let test = if c.test_labeled > 0 {
        Some(generate_split(&c.test_spec(), c.test_labeled, 0, &c.out_dir, "test")?)
    } else {
        None
    };
    println!(
        "wrote {} labelled + {} unlabelled training scenes and {} test scenes to {}",
        c.labeled,
        c.unlabeled,
        c.test_labeled,
        c.out_dir.display()
    );
    Ok(Generated { train, test })
}
