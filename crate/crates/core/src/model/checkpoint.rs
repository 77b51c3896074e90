//! Checkpoint container: `b"FCKP"`, `u32` version, `u32` header length,
//! a JSON header, then the parameters as little-endian `f32` blocks in the
//! order listed by the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Architecture;
use super::ScoreModel;
use crate::datagen::{source_from_spec, ManifestSource};
use crate::error::{Error, Result};
use crate::fields::{GridSpec, NormalizationSpec};
use crate::pde::PdeContext;

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ScoreModel,
    pub normalization: NormalizationSpec,
    /// Source geometry of the training data, when known.
    pub source: Option<ManifestSource>,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    grid: GridSpec,
    normalization: NormalizationSpec,
    sigma_data: f64,
    source: Option<ManifestSource>,
    training_config_hash: String,
    param_count: usize,
    blocks: Vec<Block>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Block {
    name: String,
    len: usize,
}

impl Checkpoint {
    /// Parameters are rounded to `f32` here so that the in-memory model is
    /// exactly what a save/load cycle reproduces.
    pub fn new(
        mut model: ScoreModel,
        normalization: NormalizationSpec,
        source: Option<ManifestSource>,
        config_hash: String,
    ) -> Self {
        model.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
        Self {
            model,
            normalization,
            source,
            config_hash,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.model.grid
    }

    /// Physics context for the training data's source term.
    pub fn pde_context(&self) -> Result<PdeContext> {
        let src = self
            .source
            .ok_or_else(|| Error::invalid("checkpoint carries no source term"))?;
        let q = source_from_spec(&self.model.grid, &src.physical)?.scaled(src.normalized_scale);
        Ok(PdeContext::new(self.normalization, &q))
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            architecture: self.model.arch.clone(),
            grid: self.model.grid,
            normalization: self.normalization,
            sigma_data: self.model.sigma_data,
            source: self.source,
            training_config_hash: self.config_hash.clone(),
            param_count: self.model.params.len(),
            blocks: self
                .model
                .arch
                .blocks()
                .into_iter()
                .map(|(name, len)| Block { name, len })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.model.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing FCKP magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(Error::format(path, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| Error::json(path, e))?;
        let expected_blocks = header.architecture.blocks();
        if expected_blocks.len() != header.blocks.len()
            || expected_blocks
                .iter()
                .zip(&header.blocks)
                .any(|((n, l), b)| *n != b.name || *l != b.len)
        {
            return Err(Error::format(
                path,
                "block list does not match architecture",
            ));
        }
        let body = &bytes[12 + hlen..];
        if body.len() != 4 * header.param_count
            || header.param_count != header.architecture.param_count()
        {
            return Err(Error::format(
                path,
                format!(
                    "expected {} parameters, found {} bytes",
                    header.param_count,
                    body.len()
                ),
            ));
        }
        let params: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::format(path, "non-finite parameter"));
        }
        let model = ScoreModel::new(header.architecture, params, header.sigma_data, header.grid)?;
        Ok(Self {
            model,
            normalization: header.normalization,
            source: header.source,
            config_hash: header.training_config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{rng_from_seed, SourceSpec};
    use crate::fields::{Field, JointState};
    use rand::Rng;

    fn checkpoint() -> Checkpoint {
        let g = GridSpec::new(8, 8, 31.25).unwrap();
        let arch = Architecture::default();
        let mut rng = rng_from_seed(1);
        let params = (0..arch.param_count())
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        let model = ScoreModel::new(arch, params, 0.5, g).unwrap();
        Checkpoint::new(
            model,
            NormalizationSpec::new(-13.0123456789, 1.87654321, 0.0, 0.712345).unwrap(),
            Some(ManifestSource {
                physical: SourceSpec {
                    injection_col: 2,
                    production_col: 5,
                    rate: 5e-16,
                },
                normalized_scale: 1.0 / 0.3561725,
            }),
            "abc123".into(),
        )
    }

    #[test]
    fn save_load_is_bit_exact() {
        let c = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), c.encode());

        let g = *c.grid();
        let mut rng = rng_from_seed(2);
        let x = JointState::new(
            Field::from_fn(g, |_, _| rng.random_range(-1.0..1.0)),
            Field::from_fn(g, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let a = c.model.forward(&x, 0.3).unwrap().to_flat();
        let b = back.model.forward(&x, 0.3).unwrap().to_flat();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn rejects_corruption() {
        let c = checkpoint();
        let mut bytes = c.encode();
        let p = Path::new("mem");
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::decode(&bytes, p).is_err());
        assert!(Checkpoint::decode(b"FGRD\x01\0\0\0\0\0\0\0", p).is_err());
    }

    #[test]
    fn pde_context_from_checkpoint() {
        let c = checkpoint();
        let ctx = c.pde_context().unwrap();
        let want = 5e-16 / 8.0 / 0.3561725;
        assert!((ctx.q_norm.get(0, 2) - want).abs() < 1e-12 * want);
        assert_eq!(ctx.q_norm.sum(), 0.0);
    }
}
