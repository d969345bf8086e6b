//! Text checkpoints: the run config as a `# ` header, then one line per
//! scaler entry and per named tensor. Values are written as the hex of their
//! IEEE-754 bits so a save/load round trip is bit-exact.
//!
//! ```text
//! # run config (TOML):
//! # seed = 1
//! # ...
//! model dctev
//! scaler home_001 3ff0000000000000 3fe0000000000000
//! tensor kappa 20,64 3fb99999999999a ...
//! ```

use crate::config::RunConfig;
use crate::dataio::{HomeStats, Scaler};
use crate::error::{Error, Result};
use crate::model::{DctEvParams, MlpParams, Model, ModelKind, Network};
use crate::tensorkit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub scaler: Option<Scaler>,
}

/// Untrained model for `config`, initialised from the root seed.
pub fn init_model(config: &RunConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    Ok(match config.model {
        ModelKind::Dctev => Model::DctEv(DctEvParams::init(&config.model_config(), &mut rng)?),
        ModelKind::Mlp => Model::Mlp(MlpParams::init(&config.mlp_config(), &mut rng)?),
    })
}

fn bits(v: f64) -> String {
    format!("{:x}", v.to_bits())
}

fn unbits(s: &str, line: u64) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| Error::Parse {
            line,
            message: format!("bad value {s:?}: {e}"),
        })
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for l in self.config.header_lines() {
            writeln!(out, "# {l}")?;
        }
        let kind = match self.model.kind() {
            ModelKind::Dctev => "dctev",
            ModelKind::Mlp => "mlp",
        };
        writeln!(out, "model {kind}")?;
        if let Some(scaler) = &self.scaler {
            for (home, s) in &scaler.homes {
                writeln!(out, "scaler {home} {} {}", bits(s.mean), bits(s.std))?;
            }
        }
        for (name, t) in self.model.named_params() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            write!(out, "tensor {name} {}", shape.join(","))?;
            for &v in t.data() {
                write!(out, " {}", bits(v))?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config = RunConfig::from_header(text)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut model = init_model(&config)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut homes = std::collections::BTreeMap::new();
        let mut tensors = Vec::new();
        let mut kind = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx as u64 + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_ascii_whitespace();
            match parts.next() {
                Some("model") => kind = parts.next().map(str::to_string),
                Some("scaler") => {
                    let (Some(home), Some(m), Some(s)) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(Error::Parse {
                            line: lineno,
                            message: "scaler line needs home, mean and std".into(),
                        });
                    };
                    homes.insert(
                        home.to_string(),
                        HomeStats {
                            mean: unbits(m, lineno)?,
                            std: unbits(s, lineno)?,
                        },
                    );
                }
                Some("tensor") => {
                    let (Some(name), Some(shape)) = (parts.next(), parts.next()) else {
                        return Err(Error::Parse {
                            line: lineno,
                            message: "tensor line needs a name and shape".into(),
                        });
                    };
                    let shape: Vec<usize> = shape
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Parse {
                            line: lineno,
                            message: format!("bad shape: {e}"),
                        })?;
                    let data = parts.map(|v| unbits(v, lineno)).collect::<Result<Vec<f64>>>()?;
                    tensors.push((name.to_string(), Tensor::new(shape, data)?));
                }
                Some(other) => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("unknown record {other:?}"),
                    })
                }
                None => {}
            }
        }
        let want = match config.model {
            ModelKind::Dctev => "dctev",
            ModelKind::Mlp => "mlp",
        };
        if kind.as_deref() != Some(want) {
            return Err(Error::Checkpoint(format!(
                "model line {kind:?} does not match configured model {want}"
            )));
        }
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got, t)) in expected.iter().zip(&tensors) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name} {shape:?}, found {got} {:?}",
                    t.shape()
                )));
            }
        }
        let values: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t).collect();
        model.set_params(&values)?;
        Ok(Checkpoint {
            config,
            model,
            scaler: (!homes.is_empty()).then_some(Scaler { homes }),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::parse(&text)
    }
}
