//! Model bundles: every fitted stage of a pipeline in one versioned file.
//!
//! ```text
//! "TFVB"  u32 version  u32 section_count
//! repeat: u32 name_len  name (UTF-8)  u32 payload_len  payload (a TFV1 stream)
//! ```
//!
//! Every stage is optional, so a bundle holding only the autoencoder and the
//! descriptor reducer is enough for feature extraction.

use std::path::Path;

use super::tfv::{self, split_f64, join_f64, Reader, Record};
use crate::autoencoder::{AutoencoderConfig, AutoencoderModel};
use crate::classifier::LinearSvmModel;
use crate::error::{Error, Result};
use crate::features::{DescriptorReducer, PcaModel, Reduction, TapConfig};
use crate::fisher::Variant;
use crate::gmm::GaussianMixture;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFVB";
pub const VERSION: u32 = 1;

const META: u32 = u32::MAX;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub autoencoder: Option<AutoencoderModel>,
    pub reducer: Option<DescriptorReducer>,
    pub gmm: Option<GaussianMixture>,
    pub svm: Option<LinearSvmModel>,
    pub variant: Option<Variant>,
    /// Class names indexed by label id.
    pub class_names: Vec<String>,
}

impl Bundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&str, Vec<Record>)> = Vec::new();
        if let Some(ae) = &self.autoencoder {
            sections.push(("autoencoder", autoencoder_records(ae)?));
        }
        if let Some(r) = &self.reducer {
            sections.push(("features", reducer_records(r)?));
        }
        if let Some(g) = &self.gmm {
            sections.push(("gmm", gmm_records(g)?));
        }
        if let Some(s) = &self.svm {
            sections.push(("svm", svm_records(s)?));
        }
        if let Some(v) = self.variant {
            sections.push(("variant", vec![Record::new(META, Tensor::from_vec(vec![variant_code(v) as f32]))]));
        }
        if !self.class_names.is_empty() {
            let recs = self
                .class_names
                .iter()
                .enumerate()
                .map(|(i, n)| Record::new(i as u32, Tensor::from_vec(n.bytes().map(f32::from).collect())))
                .collect();
            sections.push(("labels", recs));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, records) in sections {
            let payload = tfv::encode(&records);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes, 0);
        let magic = rd.take(4, "bundle magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"TFVB\"")));
        }
        let at = rd.offset();
        let version = rd.u32("bundle version")?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported bundle version {version}")));
        }
        let count = rd.u32("section count")?;
        let mut bundle = Bundle::default();
        let mut seen: Vec<String> = Vec::new();
        for _ in 0..count {
            let at = rd.offset();
            let len = rd.u32("section name length")? as usize;
            let name = std::str::from_utf8(rd.take(len, "section name")?)
                .map_err(|_| Error::format(at, "section name is not UTF-8"))?
                .to_string();
            if seen.contains(&name) {
                return Err(Error::format(at, format!("section '{name}' appears twice")));
            }
            let plen = rd.u32("section length")? as usize;
            let base = rd.offset();
            let payload = rd.take(plen, "section payload")?;
            let parsed = tfv::decode_at(payload, base).and_then(|records| bundle.load_section(&name, records));
            parsed.map_err(|e| in_section(&name, base, e))?;
            seen.push(name);
        }
        if !rd.is_done() {
            return Err(Error::format(rd.offset(), "trailing bytes after last section"));
        }
        Ok(bundle)
    }

    fn load_section(&mut self, name: &str, records: Vec<Record>) -> Result<()> {
        match name {
            "autoencoder" => self.autoencoder = Some(autoencoder_from(records)?),
            "features" => self.reducer = Some(reducer_from(records)?),
            "gmm" => self.gmm = Some(gmm_from(records)?),
            "svm" => self.svm = Some(svm_from(records)?),
            "variant" => {
                let code = records.first().and_then(|r| r.array.data().first().copied());
                self.variant = Some(code.and_then(|c| variant_from_code(c as u32)).ok_or_else(|| Error::invalid("unknown variant code"))?);
            }
            "labels" => {
                self.class_names = records
                    .iter()
                    .map(|r| {
                        let bytes: Vec<u8> = r.array.data().iter().map(|&b| b as u8).collect();
                        String::from_utf8(bytes).map_err(|_| Error::invalid("class name is not UTF-8"))
                    })
                    .collect::<Result<_>>()?;
            }
            other => log::warn!("ignoring unknown bundle section '{other}'"),
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Bundle::from_bytes(&bytes)
    }
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    Bundle::load(path)
}

fn in_section(name: &str, base: usize, e: Error) -> Error {
    match e {
        Error::Format { offset, message } => Error::format(offset, format!("section '{name}': {message}")),
        other => Error::format(base, format!("section '{name}': {other}")),
    }
}

fn variant_code(v: Variant) -> u32 {
    match v {
        Variant::Fv => 0,
        Variant::FvFc => 1,
        Variant::FvAe => 2,
        Variant::FcFvAe => 3,
    }
}

fn variant_from_code(c: u32) -> Option<Variant> {
    [Variant::Fv, Variant::FvFc, Variant::FvAe, Variant::FcFvAe].get(c as usize).copied()
}

fn reduction_code(r: Reduction) -> f64 {
    match r {
        Reduction::Pca => 0.0,
        Reduction::AvgPool => 1.0,
        Reduction::MaxPool => 2.0,
    }
}

fn meta(values: &[f64]) -> Result<Record> {
    Ok(Record::new(META, split_f64(values, &[values.len()])?))
}

fn take_meta(records: &[Record], min_len: usize) -> Result<Vec<f64>> {
    let first = records.first().filter(|r| r.tap == META).ok_or_else(|| Error::invalid("missing metadata record"))?;
    let (values, _) = join_f64(&first.array)?;
    if values.len() < min_len {
        return Err(Error::invalid(format!("metadata has {} values, expected {min_len}", values.len())));
    }
    Ok(values)
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::invalid(format!("{what} {v} is not a count")));
    }
    Ok(v as usize)
}

fn autoencoder_records(ae: &AutoencoderModel) -> Result<Vec<Record>> {
    let c = &ae.config;
    let mut recs = vec![meta(&[
        c.in_channels as f64,
        c.levels as f64,
        c.base_channels as f64,
        c.kernel_size as f64,
        c.denoising as u8 as f64,
        c.noise_sigma as f64,
        c.learning_rate as f64,
        c.epochs as f64,
        c.batch_size as f64,
        (c.seed >> 32) as f64,
        (c.seed & 0xFFFF_FFFF) as f64,
    ])?];
    recs.extend(ae.params().into_iter().enumerate().map(|(i, p)| Record::new(i as u32, p.clone())));
    Ok(recs)
}

fn autoencoder_from(records: Vec<Record>) -> Result<AutoencoderModel> {
    let m = take_meta(&records, 11)?;
    let config = AutoencoderConfig {
        in_channels: as_count(m[0], "in_channels")?,
        levels: as_count(m[1], "levels")?,
        base_channels: as_count(m[2], "base_channels")?,
        kernel_size: as_count(m[3], "kernel_size")?,
        denoising: m[4] != 0.0,
        noise_sigma: m[5] as f32,
        learning_rate: m[6] as f32,
        epochs: as_count(m[7], "epochs")?,
        batch_size: as_count(m[8], "batch_size")?,
        seed: ((as_count(m[9], "seed")? as u64) << 32) | as_count(m[10], "seed")? as u64,
    };
    let mut model = AutoencoderModel::new(config)?;
    let params = &records[1..];
    let slots = model.params_mut();
    if params.len() != slots.len() {
        return Err(Error::invalid(format!("expected {} parameter arrays, found {}", slots.len(), params.len())));
    }
    for (i, (slot, rec)) in slots.into_iter().zip(params).enumerate() {
        if rec.array.shape() != slot.shape() {
            return Err(Error::invalid(format!(
                "parameter {i} has shape {:?}, expected {:?}",
                rec.array.shape(),
                slot.shape()
            )));
        }
        *slot = rec.array.clone();
    }
    Ok(model)
}

fn reducer_records(r: &DescriptorReducer) -> Result<Vec<Record>> {
    let mut m = vec![reduction_code(r.config.reduction), r.config.target_dim as f64];
    m.extend(r.config.taps.iter().map(|&t| t as f64));
    let mut recs = vec![meta(&m)?];
    for (tap, pca) in &r.pcas {
        recs.push(Record::new(*tap, Tensor::from_vec(pca.mean.clone())));
        recs.push(Record::new(*tap, pca.components.clone()));
        recs.push(Record::new(*tap, Tensor::from_vec(pca.explained_variance.clone())));
    }
    Ok(recs)
}

fn reducer_from(records: Vec<Record>) -> Result<DescriptorReducer> {
    let m = take_meta(&records, 2)?;
    let reduction = match m[0] as u32 {
        0 => Reduction::Pca,
        1 => Reduction::AvgPool,
        2 => Reduction::MaxPool,
        other => return Err(Error::invalid(format!("unknown reduction code {other}"))),
    };
    let taps = m[2..].iter().map(|&t| as_count(t, "tap").map(|t| t as u32)).collect::<Result<Vec<_>>>()?;
    let config = TapConfig { taps, reduction, target_dim: as_count(m[1], "target_dim")? };
    let rest = &records[1..];
    if rest.len() % 3 != 0 {
        return Err(Error::invalid("PCA records come in triples"));
    }
    let mut pcas = Vec::new();
    for chunk in rest.chunks(3) {
        let pca = PcaModel {
            mean: chunk[0].array.data().to_vec(),
            components: chunk[1].array.clone(),
            explained_variance: chunk[2].array.data().to_vec(),
        };
        if pca.components.shape() != [pca.input_dim(), pca.output_dim()] {
            return Err(Error::invalid(format!("PCA for tap {} has inconsistent shapes", chunk[0].tap)));
        }
        pcas.push((chunk[0].tap, pca));
    }
    Ok(DescriptorReducer { config, pcas })
}

fn gmm_records(g: &GaussianMixture) -> Result<Vec<Record>> {
    let (k, d) = (g.components(), g.dim());
    Ok(vec![
        Record::new(0, split_f64(g.weights(), &[k])?),
        Record::new(1, split_f64(g.means(), &[k, d])?),
        Record::new(2, split_f64(g.variances(), &[k, d])?),
    ])
}

fn gmm_from(records: Vec<Record>) -> Result<GaussianMixture> {
    if records.len() != 3 {
        return Err(Error::invalid(format!("expected 3 mixture records, found {}", records.len())));
    }
    let (w, _) = join_f64(&records[0].array)?;
    let (m, _) = join_f64(&records[1].array)?;
    let (v, _) = join_f64(&records[2].array)?;
    GaussianMixture::new(w, m, v)
}

fn svm_records(s: &LinearSvmModel) -> Result<Vec<Record>> {
    let n = s.classes.len();
    let classes: Vec<f64> = s.classes.iter().map(|&c| c as f64).collect();
    Ok(vec![
        meta(&[s.c])?,
        Record::new(0, split_f64(&classes, &[n])?),
        Record::new(1, split_f64(&s.weights, &[n, s.dim()])?),
        Record::new(2, split_f64(&s.biases, &[n])?),
    ])
}

fn svm_from(records: Vec<Record>) -> Result<LinearSvmModel> {
    let m = take_meta(&records, 1)?;
    if records.len() != 4 {
        return Err(Error::invalid(format!("expected 4 SVM records, found {}", records.len())));
    }
    let (classes, _) = join_f64(&records[1].array)?;
    let classes = classes.iter().map(|&c| as_count(c, "class").map(|c| c as u32)).collect::<Result<Vec<_>>>()?;
    let (w, _) = join_f64(&records[2].array)?;
    let (b, _) = join_f64(&records[3].array)?;
    LinearSvmModel::new(classes, w, b, m[0])
}
