//! On-disk engine state: the network, one file per task summary and a small
//! text manifest of `key=value` lines.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{Engine, Mode};
use crate::error::{FrclError, Result};
use crate::feature_net::FeatureNet;
use crate::scalar::Scalar;
use crate::summary::TaskSummary;

const NET_FILE: &str = "net.bin";
const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub mode: Mode,
    pub step: u64,
    pub task_count: usize,
    pub seed: u64,
}

impl Manifest {
    fn render(&self) -> String {
        let mode = match self.mode {
            Mode::Frcl => "frcl",
            Mode::Baseline => "baseline",
        };
        format!(
            "mode={mode}\nstep={}\ntask_count={}\nseed={}\n",
            self.step, self.task_count, self.seed
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| FrclError::BadCheckpoint(m);
        let mut mode = None;
        let mut step = None;
        let mut task_count = None;
        let mut seed = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("manifest line {line:?}")))?;
            let num = |v: &str| v.trim().parse::<u64>().map_err(|_| bad(format!("bad number for {k}: {v:?}")));
            match k.trim() {
                "mode" => {
                    mode = Some(match v.trim() {
                        "frcl" => Mode::Frcl,
                        "baseline" => Mode::Baseline,
                        other => return Err(bad(format!("unknown mode {other:?}"))),
                    })
                }
                "step" => step = Some(num(v)?),
                "task_count" => task_count = Some(num(v)? as usize),
                "seed" => seed = Some(num(v)?),
                // unknown keys are tolerated for forward compatibility
                _ => {}
            }
        }
        Ok(Self {
            mode: mode.ok_or_else(|| bad("manifest lacks mode".into()))?,
            step: step.ok_or_else(|| bad("manifest lacks step".into()))?,
            task_count: task_count.ok_or_else(|| bad("manifest lacks task_count".into()))?,
            seed: seed.ok_or_else(|| bad("manifest lacks seed".into()))?,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
}

fn summary_file(task: usize) -> String {
    format!("summary_{task:03}.bin")
}

impl<T: Scalar> Engine<T> {
    /// Writes the network, every summary and the manifest into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        self.net.write_checkpoint(BufWriter::new(fs::File::create(dir.join(NET_FILE))?))?;
        for s in &self.summaries {
            s.write_checkpoint(BufWriter::new(fs::File::create(dir.join(summary_file(s.task_id())))?))?;
        }
        let manifest = Manifest {
            mode: self.cfg.mode,
            step: self.step,
            task_count: self.task_count(),
            seed: self.cfg.seed,
        };
        fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
        Ok(manifest)
    }

    /// Restores network, summaries and step counter from `dir`. Optimiser
    /// moments are not part of a checkpoint and restart from zero.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<Manifest> {
        let manifest = read_manifest(dir)?;
        if manifest.mode != self.cfg.mode {
            return Err(FrclError::BadCheckpoint("checkpoint mode differs from the configuration".into()));
        }
        if manifest.mode == Mode::Baseline {
            return Err(FrclError::BadCheckpoint("baseline heads are not checkpointed".into()));
        }
        let net = FeatureNet::read_checkpoint(BufReader::new(fs::File::open(dir.join(NET_FILE))?))?;
        if net.sizes() != self.cfg.layer_sizes.as_slice() {
            return Err(FrclError::BadCheckpoint(format!(
                "network sizes {:?} differ from the configuration",
                net.sizes()
            )));
        }
        let summaries = (0..manifest.task_count)
            .map(|t| TaskSummary::read_checkpoint(BufReader::new(fs::File::open(dir.join(summary_file(t)))?)))
            .collect::<Result<Vec<_>>>()?;
        self.theta_adam = crate::optim::AdamGroup::new(net.param_count());
        self.net = net;
        self.summaries = summaries;
        self.step = manifest.step;
        self.tasks_started = manifest.task_count;
        self.current = None;
        Ok(manifest)
    }
}
