//! Two-hidden-layer ReLU network over sparse occupancy planes with exact
//! backpropagation. All parameters live in one flat vector so updates,
//! finite differences and serialization share a single layout.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sim::Action;
use crate::{Error, Result};

pub const ACTIONS: usize = Action::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Goal-conditioned: input is a (current, goal) plane pair.
    Gc,
    /// Language-conditioned: current planes plus template/object/target embeddings.
    Lc,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Gc => 0,
            Variant::Lc => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gc => "gc",
            Variant::Lc => "lc",
        }
    }
}

/// Token vocabulary sizes of the language-conditioned variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangVocab {
    pub templates: usize,
    pub object_kinds: usize,
    /// Container kinds followed by region kinds.
    pub targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub variant: Variant,
    /// Length of the binary plane input (pair for GC, single state for LC).
    pub plane_dim: usize,
    pub hidden: [usize; 2],
    pub embed_dim: usize,
    pub vocab: LangVocab,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    emb: [usize; 3],
    len: usize,
}

impl PolicyDims {
    pub fn lang_dim(&self) -> usize {
        match self.variant {
            Variant::Gc => 0,
            Variant::Lc => 3 * self.embed_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.plane_dim + self.lang_dim()
    }

    fn vocab_sizes(&self) -> [usize; 3] {
        match self.variant {
            Variant::Gc => [0; 3],
            Variant::Lc => [self.vocab.templates, self.vocab.object_kinds, self.vocab.targets],
        }
    }

    fn layout(&self) -> Layout {
        let [h0, h1] = self.hidden;
        let w1 = 0;
        let b1 = w1 + self.input_dim() * h0;
        let w2 = b1 + h0;
        let b2 = w2 + h1 * h0;
        let w3 = b2 + h1;
        let b3 = w3 + ACTIONS * h1;
        let mut cursor = b3 + ACTIONS;
        let mut emb = [0; 3];
        for (slot, n) in emb.iter_mut().zip(self.vocab_sizes()) {
            *slot = cursor;
            cursor += n * self.embed_dim;
        }
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            emb,
            len: cursor,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// Sparse network input: active plane coordinates plus, for the LC variant,
/// the (template, object kind, target) token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub active: Vec<(u32, f64)>,
    pub tokens: Option<[u32; 3]>,
}

impl Features {
    pub fn binary(indices: impl IntoIterator<Item = u32>) -> Self {
        Features {
            active: indices.into_iter().map(|i| (i, 1.0)).collect(),
            tokens: None,
        }
    }

    pub fn from_dense(planes: &[f64]) -> Self {
        Features {
            active: planes
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
            tokens: None,
        }
    }

    pub fn with_tokens(mut self, tokens: [u32; 3]) -> Self {
        self.tokens = Some(tokens);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub theta: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
struct Cache {
    lang: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    h2: Vec<f64>,
    a2: Vec<f64>,
    logits: [f64; ACTIONS],
}

pub fn init_policy(dims: PolicyDims, seed: u64) -> Result<PolicyParams> {
    if dims.plane_dim == 0 || dims.hidden.contains(&0) {
        return Err(Error::DimMismatch("policy dimensions must be positive".into()));
    }
    if dims.variant == Variant::Lc && (dims.embed_dim == 0 || dims.vocab_sizes().contains(&0)) {
        return Err(Error::DimMismatch(
            "language-conditioned policy needs a non-empty vocabulary".into(),
        ));
    }
    let l = dims.layout();
    let mut rng = crate::rng::derived(seed, "init", 0);
    let mut theta = vec![0.0; l.len];
    let [h0, h1] = dims.hidden;
    let mut fill = |range: std::ops::Range<usize>, scale: f64| {
        for w in &mut theta[range] {
            *w = rng.gen_range(-scale..scale);
        }
    };
    fill(l.w1..l.b1, (6.0 / dims.input_dim() as f64).sqrt());
    fill(l.w2..l.b2, (6.0 / h0 as f64).sqrt());
    fill(l.w3..l.b3, (6.0 / h1 as f64).sqrt());
    fill(l.emb[0]..l.len, 1.0);
    Ok(PolicyParams { dims, theta })
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl PolicyParams {
    fn check(&self, f: &Features) -> Result<()> {
        let d = &self.dims;
        if let Some((i, _)) = f.active.iter().find(|(i, _)| *i as usize >= d.plane_dim) {
            return Err(Error::DimMismatch(format!(
                "feature index {i} outside plane input of length {}",
                d.plane_dim
            )));
        }
        match (d.variant, f.tokens) {
            (Variant::Gc, None) => Ok(()),
            (Variant::Lc, Some(t)) => {
                let sizes = d.vocab_sizes();
                if t.iter().zip(sizes).any(|(tok, n)| *tok as usize >= n) {
                    Err(Error::DimMismatch(format!("token ids {t:?} outside vocabulary {sizes:?}")))
                } else {
                    Ok(())
                }
            }
            (Variant::Gc, Some(_)) => Err(Error::DimMismatch(
                "goal-conditioned policy takes no language tokens".into(),
            )),
            (Variant::Lc, None) => Err(Error::DimMismatch(
                "language-conditioned policy needs language tokens".into(),
            )),
        }
    }

    fn forward_cache(&self, f: &Features) -> Result<Cache> {
        self.check(f)?;
        let d = &self.dims;
        let l = d.layout();
        let [h0, h1n] = d.hidden;
        let th = &self.theta;

        let mut h1 = th[l.b1..l.b1 + h0].to_vec();
        for &(i, v) in &f.active {
            let row = &th[l.w1 + i as usize * h0..l.w1 + (i as usize + 1) * h0];
            for (h, w) in h1.iter_mut().zip(row) {
                *h += v * w;
            }
        }
        let mut lang = Vec::new();
        if let Some(tokens) = f.tokens {
            let e = d.embed_dim;
            for (slot, tok) in tokens.iter().enumerate() {
                let start = l.emb[slot] + *tok as usize * e;
                lang.extend_from_slice(&th[start..start + e]);
            }
            for (k, v) in lang.iter().enumerate() {
                let i = d.plane_dim + k;
                let row = &th[l.w1 + i * h0..l.w1 + (i + 1) * h0];
                for (h, w) in h1.iter_mut().zip(row) {
                    *h += v * w;
                }
            }
        }
        let a1 = relu(&h1);
        let mut h2 = th[l.b2..l.b2 + h1n].to_vec();
        for (k, h) in h2.iter_mut().enumerate() {
            let row = &th[l.w2 + k * h0..l.w2 + (k + 1) * h0];
            *h += row.iter().zip(&a1).map(|(w, a)| w * a).sum::<f64>();
        }
        let a2 = relu(&h2);
        let mut logits = [0.0; ACTIONS];
        for (a, z) in logits.iter_mut().enumerate() {
            let row = &th[l.w3 + a * h1n..l.w3 + (a + 1) * h1n];
            *z = th[l.b3 + a] + row.iter().zip(&a2).map(|(w, x)| w * x).sum::<f64>();
        }
        Ok(Cache {
            lang,
            h1,
            a1,
            h2,
            a2,
            logits,
        })
    }

    /// Accumulates `scale * d(cross-entropy)/d(theta)` into `grad`; returns the loss.
    fn backward(&self, f: &Features, label: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let c = self.forward_cache(f)?;
        let d = &self.dims;
        let l = d.layout();
        let [h0, h1n] = d.hidden;
        let th = &self.theta;

        let p = softmax(&c.logits);
        let m = c.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + c.logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let loss = lse - c.logits[label];

        let mut dz = [0.0; ACTIONS];
        for a in 0..ACTIONS {
            dz[a] = scale * (p[a] - if a == label { 1.0 } else { 0.0 });
        }
        let mut da2 = vec![0.0; h1n];
        for a in 0..ACTIONS {
            grad[l.b3 + a] += dz[a];
            let row = l.w3 + a * h1n;
            for k in 0..h1n {
                grad[row + k] += dz[a] * c.a2[k];
                da2[k] += th[row + k] * dz[a];
            }
        }
        let mut da1 = vec![0.0; h0];
        for k in 0..h1n {
            if c.h2[k] <= 0.0 {
                continue;
            }
            let g = da2[k];
            grad[l.b2 + k] += g;
            let row = l.w2 + k * h0;
            for j in 0..h0 {
                grad[row + j] += g * c.a1[j];
                da1[j] += th[row + j] * g;
            }
        }
        let dh1: Vec<f64> = da1
            .iter()
            .zip(&c.h1)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        for j in 0..h0 {
            grad[l.b1 + j] += dh1[j];
        }
        for &(i, v) in &f.active {
            let row = l.w1 + i as usize * h0;
            for j in 0..h0 {
                grad[row + j] += v * dh1[j];
            }
        }
        if let Some(tokens) = f.tokens {
            let e = d.embed_dim;
            for (k, v) in c.lang.iter().enumerate() {
                let row = l.w1 + (d.plane_dim + k) * h0;
                let mut dlang = 0.0;
                for j in 0..h0 {
                    grad[row + j] += v * dh1[j];
                    dlang += th[row + j] * dh1[j];
                }
                let slot = k / e;
                grad[l.emb[slot] + tokens[slot] as usize * e + k % e] += dlang;
            }
        }
        Ok(loss)
    }

    pub fn param_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }

    /// Short identifier recorded with collected trajectories.
    pub fn version(&self) -> String {
        format!("{}-{}", self.dims.variant.name(), &self.param_hash()[..12])
    }
}

pub fn policy_forward(params: &PolicyParams, features: &Features) -> Result<[f64; ACTIONS]> {
    Ok(params.forward_cache(features)?.logits)
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(params: &PolicyParams, batch: &[(Features, Action)]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.theta.len()];
    let loss = accumulate_grad(params, batch.iter().map(|(f, a)| (f, *a)), batch.len(), &mut grad)?;
    Ok((loss, grad))
}

/// Adds the mean-loss gradient of `batch` (of size `n`) into `grad`; returns the mean loss.
pub(crate) fn accumulate_grad<'a>(
    params: &PolicyParams,
    batch: impl Iterator<Item = (&'a Features, Action)>,
    n: usize,
    grad: &mut [f64],
) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyDataset("batch".into()));
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for (f, a) in batch {
        total += params.backward(f, a.index(), scale, grad)?;
    }
    Ok(total * scale)
}

/// Mean cross-entropy only.
pub fn loss(params: &PolicyParams, batch: &[(Features, Action)]) -> Result<f64> {
    let mut total = 0.0;
    for (f, a) in batch {
        let z = policy_forward(params, f)?;
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[a.index()];
    }
    Ok(total / batch.len().max(1) as f64)
}

pub fn sgd_update(params: &PolicyParams, gradient: &[f64], step: f64) -> Result<PolicyParams> {
    let mut next = params.clone();
    sgd_update_in_place(&mut next, gradient, step)?;
    Ok(next)
}

pub fn sgd_update_in_place(params: &mut PolicyParams, gradient: &[f64], step: f64) -> Result<()> {
    if gradient.len() != params.theta.len() {
        return Err(Error::DimMismatch(format!(
            "gradient length {} vs {} parameters",
            gradient.len(),
            params.theta.len()
        )));
    }
    for (w, g) in params.theta.iter_mut().zip(gradient) {
        *w -= step * g;
    }
    Ok(())
}

// Artifact layout (little endian):
//   magic "AIPOLICY" | u32 version | u8 variant | u32 plane_dim, hidden0,
//   hidden1, actions, embed_dim, templates, object_kinds, targets |
//   u64 parameter count | f64 parameters in layout order
const MAGIC: &[u8; 8] = b"AIPOLICY";
const FORMAT_VERSION: u32 = 1;

impl PolicyParams {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let d = &self.dims;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[d.variant.tag()])?;
        for v in [
            d.plane_dim,
            d.hidden[0],
            d.hidden[1],
            ACTIONS,
            d.embed_dim,
            d.vocab.templates,
            d.vocab.object_kinds,
            d.vocab.targets,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.theta.len() as u64).to_le_bytes())?;
        for x in &self.theta {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + 8 * self.theta.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::BadArtifact(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<usize> {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(u32buf) as usize)
        };
        let version = read_u32(r)?;
        if version != FORMAT_VERSION as usize {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|_| bad("truncated header"))?;
        let variant = match tag[0] {
            0 => Variant::Gc,
            1 => Variant::Lc,
            t => return Err(bad(&format!("unknown variant tag {t}"))),
        };
        let mut f = [0usize; 8];
        for slot in &mut f {
            *slot = read_u32(r)?;
        }
        if f[3] != ACTIONS {
            return Err(bad("action count mismatch"));
        }
        let dims = PolicyDims {
            variant,
            plane_dim: f[0],
            hidden: [f[1], f[2]],
            embed_dim: f[4],
            vocab: LangVocab {
                templates: f[5],
                object_kinds: f[6],
                targets: f[7],
            },
        };
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated header"))?;
        let n = u64::from_le_bytes(u64buf) as usize;
        if n != dims.param_count() {
            return Err(bad("parameter count does not match dimensions"));
        }
        let mut theta = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf).map_err(|_| bad("truncated parameters"))?;
            theta.push(f64::from_le_bytes(u64buf));
        }
        Ok(PolicyParams { dims, theta })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
