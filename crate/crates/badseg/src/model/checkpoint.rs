//! Versioned binary checkpoints: model parameters plus the taxonomy and
//! training config they were produced with.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BSEGCKPT" | version u32
//! | tax_len u32   | taxonomy TOML bytes
//! | cfg_len u32   | training-config JSON bytes
//! | input_scale f32 | num_classes u32 | feature_channels u32
//! | mask_len u32  | feature_mask f32s
//! | n_layers u32  | per layer: c_in,c_out,k,stride,pad u32; w f32s; b f32s
//! ```

use ndarray::{Array1, Array2};

use crate::data::ClassTaxonomy;
use crate::model::tensor::Conv;
use crate::model::tiny::TinySegNet;
use crate::model::ModelError;

const MAGIC: &[u8; 8] = b"BSEGCKPT";
const VERSION: u32 = 1;
/// Upper bound on any declared section length; rejects absurd allocations.
const MAX_SECTION: usize = 64 << 20;

pub struct Checkpoint {
    pub net: TinySegNet,
    pub taxonomy: ClassTaxonomy,
    pub train_config_json: String,
}

pub fn encode(net: &TinySegNet, taxonomy: &ClassTaxonomy, train_config_json: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let tax = taxonomy.to_toml_string();
    out.extend_from_slice(&(tax.len() as u32).to_le_bytes());
    out.extend_from_slice(tax.as_bytes());
    out.extend_from_slice(&(train_config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(train_config_json.as_bytes());
    out.extend_from_slice(&net.input_scale.to_le_bytes());
    out.extend_from_slice(&(net.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(net.feature_channels as u32).to_le_bytes());
    out.extend_from_slice(&(net.feature_mask.len() as u32).to_le_bytes());
    for &v in net.feature_mask.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(net.convs.len() as u32).to_le_bytes());
    for conv in &net.convs {
        for dim in [conv.c_in, conv.c_out, conv.k, conv.stride, conv.pad] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in conv.w.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in conv.b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if n > self.buf.len().saturating_sub(self.pos) {
            return Err(ModelError::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ModelError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, ModelError> {
        let n = self.u32()? as usize;
        if n > MAX_SECTION {
            return Err(ModelError::Checkpoint(format!("section length {n} too large")));
        }
        Ok(n)
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            ModelError::Checkpoint("length overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let tax_len = r.len()?;
    let tax_str = std::str::from_utf8(r.take(tax_len)?)
        .map_err(|_| ModelError::Checkpoint("taxonomy not utf-8".into()))?;
    let taxonomy = ClassTaxonomy::from_toml_str(tax_str)
        .map_err(|e| ModelError::Checkpoint(format!("taxonomy: {e}")))?;
    let cfg_len = r.len()?;
    let train_config_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| ModelError::Checkpoint("config not utf-8".into()))?
        .to_string();
    let input_scale = r.f32()?;
    if !(input_scale.is_finite() && input_scale > 0.0) {
        return Err(ModelError::Checkpoint("bad input scale".into()));
    }
    let num_classes = r.len()?;
    let feature_channels = r.len()?;
    let mask_len = r.len()?;
    let feature_mask = Array1::from_vec(r.f32_vec(mask_len)?);
    let n_layers = r.len()?;
    if n_layers == 0 || n_layers > 64 {
        return Err(ModelError::Checkpoint(format!("bad layer count {n_layers}")));
    }
    let mut convs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let c_in = r.len()?;
        let c_out = r.len()?;
        let k = r.len()?;
        let stride = r.len()?;
        let pad = r.len()?;
        if c_in == 0 || c_out == 0 || k == 0 || stride == 0 || k > 16 {
            return Err(ModelError::Checkpoint("bad layer dims".into()));
        }
        let w_len = c_out
            .checked_mul(c_in)
            .and_then(|v| v.checked_mul(k * k))
            .ok_or_else(|| ModelError::Checkpoint("layer size overflow".into()))?;
        if w_len > MAX_SECTION {
            return Err(ModelError::Checkpoint("layer too large".into()));
        }
        let w = Array2::from_shape_vec((c_out, c_in * k * k), r.f32_vec(w_len)?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let b = Array1::from_vec(r.f32_vec(c_out)?);
        convs.push(Conv {
            w,
            b,
            c_in,
            c_out,
            k,
            stride,
            pad,
        });
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    if num_classes != convs.last().unwrap().c_out {
        return Err(ModelError::Checkpoint(
            "classifier width disagrees with num_classes".into(),
        ));
    }
    if feature_mask.len() != feature_channels {
        return Err(ModelError::Checkpoint("feature mask length mismatch".into()));
    }
    Ok(Checkpoint {
        net: TinySegNet {
            convs,
            num_classes,
            feature_channels,
            feature_mask,
            input_scale,
        },
        taxonomy,
        train_config_json,
    })
}

pub fn save(path: &std::path::Path, net: &TinySegNet, taxonomy: &ClassTaxonomy, cfg_json: &str) -> Result<(), ModelError> {
    std::fs::write(path, encode(net, taxonomy, cfg_json))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint, ModelError> {
    decode(&std::fs::read(path)?)
}
