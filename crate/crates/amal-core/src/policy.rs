//! The neural query policy: a permutation-invariant set network mapping an
//! observed dataset to the next query location in `[0,1]^D`.
//!
//! Architecture: each `(x, y)` pair is embedded by an MLP into a 32-wide
//! token, two pre-norm transformer encoder layers (8 heads, no positional
//! encoding, no dropout) mix the tokens, the sequence is sum-pooled, and a
//! decoder MLP plus an elementwise `(tanh + 1) / 2` squash produces the
//! query. Forward passes run on a [`Tape`](crate::tape::Tape) so the trainer
//! can differentiate queries with respect to every parameter.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel_gp::Dataset;
use crate::tape::{concat_cols, layernorm, Tape, Var};

/// Token width after embedding ("32 dimension embedding").
pub const EMBED_WIDTH: usize = 32;
/// Hidden width of the embedder/decoder MLPs and the encoder feed-forward.
pub const HIDDEN_WIDTH: usize = 64;
/// Attention heads per encoder layer.
pub const HEADS: usize = 8;
/// Encoder layer count.
pub const ENCODER_LAYERS: usize = 2;

const CHECKPOINT_MAGIC: &[u8; 8] = b"AMALCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// All policy weights as an ordered list of named tensors plus immutable
/// architecture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dim: usize,
    embed: usize,
    hidden: usize,
    heads: usize,
    layers: usize,
    tensors: Vec<(String, Array2<f64>)>,
}

/// Policy output: the next query, strictly inside the unit hypercube.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub x: Array1<f64>,
}

/// `(name, rows, cols)` for every tensor, in canonical order.
fn layout(
    dim: usize,
    embed: usize,
    hidden: usize,
    layers: usize,
) -> Vec<(String, (usize, usize))> {
    let mut out = vec![
        ("embed.0.w".into(), (dim + 1, hidden)),
        ("embed.0.b".into(), (1, hidden)),
        ("embed.1.w".into(), (hidden, hidden)),
        ("embed.1.b".into(), (1, hidden)),
        ("embed.2.w".into(), (hidden, embed)),
        ("embed.2.b".into(), (1, embed)),
    ];
    for i in 0..layers {
        for (suffix, shape) in [
            ("ln1.g", (1, embed)),
            ("ln1.b", (1, embed)),
            ("attn.wq", (embed, embed)),
            ("attn.bq", (1, embed)),
            ("attn.wk", (embed, embed)),
            ("attn.bk", (1, embed)),
            ("attn.wv", (embed, embed)),
            ("attn.bv", (1, embed)),
            ("attn.wo", (embed, embed)),
            ("attn.bo", (1, embed)),
            ("ln2.g", (1, embed)),
            ("ln2.b", (1, embed)),
            ("ff.0.w", (embed, hidden)),
            ("ff.0.b", (1, hidden)),
            ("ff.1.w", (hidden, embed)),
            ("ff.1.b", (1, embed)),
        ] {
            out.push((format!("enc{i}.{suffix}"), shape));
        }
    }
    out.extend([
        ("dec.0.w".into(), (embed, hidden)),
        ("dec.0.b".into(), (1, hidden)),
        ("dec.1.w".into(), (hidden, hidden)),
        ("dec.1.b".into(), (1, hidden)),
        ("dec.2.w".into(), (hidden, dim)),
        ("dec.2.b".into(), (1, dim)),
    ]);
    out
}

impl PolicyParams {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tensors(&self) -> &[(String, Array2<f64>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut Vec<(String, Array2<f64>)> {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every tensor as a tape leaf, in canonical order.
    pub fn to_tape(&self, tape: &Rc<Tape>) -> PolicyVars {
        PolicyVars {
            dim: self.dim,
            embed: self.embed,
            heads: self.heads,
            layers: self.layers,
            entries: self
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }
}

/// Glorot-uniform weight initialization; biases zero, layer-norm gains one.
pub fn init_params<R: Rng>(dim: usize, rng: &mut R) -> PolicyParams {
    assert!(dim >= 1, "policy dimension must be at least 1");
    let tensors = layout(dim, EMBED_WIDTH, HIDDEN_WIDTH, ENCODER_LAYERS)
        .into_iter()
        .map(|(name, (rows, cols))| {
            let tensor = if name.contains(".w") {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
            } else if name.ends_with(".g") {
                Array2::ones((rows, cols))
            } else {
                Array2::zeros((rows, cols))
            };
            (name, tensor)
        })
        .collect();
    PolicyParams {
        dim,
        embed: EMBED_WIDTH,
        hidden: HIDDEN_WIDTH,
        heads: HEADS,
        layers: ENCODER_LAYERS,
        tensors,
    }
}

/// Policy weights registered on one tape.
pub struct PolicyVars {
    dim: usize,
    embed: usize,
    heads: usize,
    layers: usize,
    entries: Vec<(String, Var)>,
}

impl PolicyVars {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn get(&self, name: &str) -> &Var {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
            .1
    }

    /// Vars in canonical tensor order (for gradient extraction).
    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }
}

fn affine(x: &Var, w: &Var, b: &Var) -> Var {
    x.matmul(w).broadcast_add_row(b)
}

fn attention(pv: &PolicyVars, layer: usize, x: &Var) -> Var {
    let p = |s: &str| pv.get(&format!("enc{layer}.attn.{s}"));
    let q = affine(x, p("wq"), p("bq"));
    let k = affine(x, p("wk"), p("bk"));
    let v = affine(x, p("wv"), p("bv"));
    let head_dim = pv.embed / pv.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let heads: Vec<Var> = (0..pv.heads)
        .map(|h| {
            let qh = q.slice_cols(h * head_dim, head_dim);
            let kh = k.slice_cols(h * head_dim, head_dim);
            let vh = v.slice_cols(h * head_dim, head_dim);
            let scores = qh.matmul(&kh.t()).scale(scale).softmax_rows();
            scores.matmul(&vh)
        })
        .collect();
    affine(&concat_cols(&heads), p("wo"), p("bo"))
}

/// Forward pass over a `(n, D+1)` pairs matrix variable, yielding the
/// squashed `(1, D)` query.
pub fn forward_vars(pv: &PolicyVars, pairs: &Var) -> Var {
    assert_eq!(pairs.dim().1, pv.dim + 1, "pairs matrix width");
    let h = affine(pairs, pv.get("embed.0.w"), pv.get("embed.0.b")).tanh();
    let h = affine(&h, pv.get("embed.1.w"), pv.get("embed.1.b")).tanh();
    let mut h = affine(&h, pv.get("embed.2.w"), pv.get("embed.2.b"));
    for i in 0..pv.layers {
        let ln = |s: &str| pv.get(&format!("enc{i}.{s}"));
        let normed = layernorm(&h, ln("ln1.g"), ln("ln1.b"));
        h = h.add(&attention(pv, i, &normed));
        let normed = layernorm(&h, ln("ln2.g"), ln("ln2.b"));
        let ff = affine(
            &affine(&normed, ln("ff.0.w"), ln("ff.0.b")).tanh(),
            ln("ff.1.w"),
            ln("ff.1.b"),
        );
        h = h.add(&ff);
    }
    let pooled = h.sum_rows();
    let d = affine(&pooled, pv.get("dec.0.w"), pv.get("dec.0.b")).tanh();
    let d = affine(&d, pv.get("dec.1.w"), pv.get("dec.1.b")).tanh();
    let out = affine(&d, pv.get("dec.2.w"), pv.get("dec.2.b"));
    out.tanh().scale_add(0.5, 0.5)
}

/// Dataset as the `(n, D+1)` matrix `[X | Y]` consumed by the embedder.
pub fn pairs_matrix(data: &Dataset) -> Array2<f64> {
    let mut out = Array2::zeros((data.len(), data.dim() + 1));
    out.slice_mut(ndarray::s![.., ..data.dim()]).assign(&data.x());
    out.column_mut(data.dim()).assign(&data.y());
    out
}

#[cfg(test)]
thread_local! {
    /// Per-thread forward() call counter for structural tests (e.g. proving
    /// the myopic trainer makes exactly one policy call per experiment).
    pub(crate) static FORWARD_CALLS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Plain (gradient-free) forward pass.
pub fn forward(params: &PolicyParams, data: &Dataset) -> Result<QueryOutput> {
    #[cfg(test)]
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            got: data.dim(),
            context: "policy forward input dimension".into(),
        });
    }
    let tape = Tape::new(false);
    let pv = params.to_tape(&tape);
    let pairs = tape.leaf(pairs_matrix(data));
    let out = forward_vars(&pv, &pairs);
    Ok(QueryOutput {
        x: out.value().index_axis(Axis(0), 0).to_owned(),
    })
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncation)?;
    Ok(u32::from_le_bytes(buf))
}

fn truncation(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::CheckpointFormat("file truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Serialize to a self-describing versioned binary file. The write is
/// atomic: a sibling temp file is renamed into place.
pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        for meta in [
            params.dim,
            params.embed,
            params.hidden,
            params.heads,
            params.layers,
            params.tensors.len(),
        ] {
            write_u32(&mut w, meta as u32)?;
        }
        for (name, tensor) in &params.tensors {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, tensor.nrows() as u32)?;
            write_u32(&mut w, tensor.ncols() as u32)?;
            for v in tensor.iter() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and validate a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncation)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let dim = read_u32(&mut r)? as usize;
    let embed = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let heads = read_u32(&mut r)? as usize;
    let layers = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let expected = layout(dim, embed, hidden, layers);
    if count != expected.len() {
        return Err(Error::CheckpointFormat(format!(
            "expected {} tensors, header says {count}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (exp_name, exp_shape) in expected {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(truncation)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if name != exp_name || (rows, cols) != exp_shape {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name} ({rows}x{cols}) does not match expected {exp_name} \
                 ({}x{})",
                exp_shape.0, exp_shape.1
            )));
        }
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(truncation)?;
            values.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        let tensor = Array2::from_shape_vec((rows, cols), values)
            .expect("shape matches value count by construction");
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name} contains non-finite values"
            )));
        }
        tensors.push((name, tensor));
    }
    Ok(PolicyParams {
        dim,
        embed,
        hidden,
        heads,
        layers,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Dataset {
        let x = Array2::from_shape_fn((n, dim), |_| rng.gen_range(0.0..1.0));
        let y = Array1::from_iter((0..n).map(|_| rng.gen_range(-2.0..2.0)));
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn init_is_seeded_and_forward_lands_in_unit_cube() {
        let p1 = init_params(2, &mut ChaCha8Rng::seed_from_u64(5));
        let p2 = init_params(2, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(p1, p2);
        let p3 = init_params(2, &mut ChaCha8Rng::seed_from_u64(6));
        assert_ne!(p1, p3);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_dataset(&mut rng, 3, 2);
        let out = forward(&p1, &data).unwrap();
        for &c in out.x.iter() {
            assert!(c > 0.0 && c < 1.0, "coordinate {c} escaped (0,1)");
        }
    }

    #[test]
    fn forward_is_permutation_invariant() {
        let params = init_params(2, &mut ChaCha8Rng::seed_from_u64(8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = random_dataset(&mut rng, 7, 2);
        let base = forward(&params, &data).unwrap();
        // Reverse the dataset order (a specific nontrivial permutation).
        let mut rev = Dataset::empty(2);
        for i in (0..data.len()).rev() {
            rev.push(data.x().row(i), data.y()[i]).unwrap();
        }
        let permuted = forward(&params, &rev).unwrap();
        for d in 0..2 {
            assert!(
                (base.x[d] - permuted.x[d]).abs() < 1e-12,
                "permutation changed output: {} vs {}",
                base.x[d],
                permuted.x[d]
            );
        }
    }

    #[test]
    fn extreme_labels_stay_bounded() {
        let params = init_params(1, &mut ChaCha8Rng::seed_from_u64(10));
        let data = Dataset::new(array![[0.1], [0.9], [0.5]], array![1e6, -1e6, 0.0]).unwrap();
        let out = forward(&params, &data).unwrap();
        assert!(out.x[0].is_finite() && out.x[0] > 0.0 && out.x[0] < 1.0);
    }

    #[test]
    fn rejects_empty_and_mismatched_input() {
        let params = init_params(2, &mut ChaCha8Rng::seed_from_u64(11));
        assert!(matches!(
            forward(&params, &Dataset::empty(2)),
            Err(Error::EmptyDataset)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wrong = random_dataset(&mut rng, 3, 1);
        assert!(matches!(
            forward(&params, &wrong),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let params = init_params(1, &mut ChaCha8Rng::seed_from_u64(13));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data = random_dataset(&mut rng, 3, 1);
        let pairs = pairs_matrix(&data);

        let tape = Tape::new(true);
        let pv = params.to_tape(&tape);
        let pairs_var = tape.leaf(pairs.clone());
        let out = forward_vars(&pv, &pairs_var).sum_all();
        let grads = tape.backward(&out);

        let eval = |p: &PolicyParams| {
            let t = Tape::new(false);
            let pv = p.to_tape(&t);
            let pr = t.leaf(pairs.clone());
            forward_vars(&pv, &pr).sum_all().scalar()
        };

        // One representative element per tensor kind, spread across depth.
        let picks = [
            ("embed.0.w", 0, 3),
            ("embed.2.b", 0, 5),
            ("enc0.attn.wq", 3, 17),
            ("enc0.ln1.g", 0, 2),
            ("enc1.ff.0.w", 10, 20),
            ("enc1.attn.wo", 8, 8),
            ("dec.0.w", 4, 30),
            ("dec.2.b", 0, 0),
        ];
        let step = 1e-4;
        for (name, i, j) in picks {
            let idx = params
                .tensors()
                .iter()
                .position(|(n, _)| n == name)
                .unwrap();
            let ad = grads.get(&pv.entries[idx].1)[[i, j]];
            let mut plus = params.clone();
            plus.tensors_mut()[idx].1[[i, j]] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[idx].1[[i, j]] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let rel = (ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-8);
            assert!(rel < 1e-2, "{name}[{i},{j}]: ad={ad} fd={fd} rel={rel}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let params = init_params(1, &mut ChaCha8Rng::seed_from_u64(15));
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);

        // Identical forward outputs on random datasets.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let data = random_dataset(&mut rng, 4, 1);
            assert_eq!(
                forward(&params, &data).unwrap().x,
                forward(&loaded, &data).unwrap().x
            );
        }

        // Default 1-D architecture sits in the documented size band.
        let bytes = std::fs::metadata(&path).unwrap().len();
        assert!(
            (50_000..=500_000).contains(&bytes),
            "checkpoint size {bytes} outside 50-500 KB"
        );
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let params = init_params(1, &mut ChaCha8Rng::seed_from_u64(17));
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(Error::CheckpointFormat(_))
        ));
        // Wrong version is reported distinctly.
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        std::fs::write(&cut, &versioned).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn forward_latency_and_scaling() {
        let params = init_params(2, &mut ChaCha8Rng::seed_from_u64(18));
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let d21 = random_dataset(&mut rng, 21, 2);
        let time_forward = |data: &Dataset| {
            let mut best = f64::INFINITY;
            for _ in 0..5 {
                let start = Instant::now();
                forward(&params, data).unwrap();
                best = best.min(start.elapsed().as_secs_f64());
            }
            best
        };
        let t21 = time_forward(&d21);
        assert!(t21 < 0.1, "21-point forward took {t21:.4}s");

        let d100 = random_dataset(&mut rng, 100, 2);
        let d200 = random_dataset(&mut rng, 200, 2);
        let (t100, t200) = (time_forward(&d100), time_forward(&d200));
        assert!(
            t200 / t100 < 5.0,
            "scaling ratio {:.2} (t100={t100:.5}s t200={t200:.5}s)",
            t200 / t100
        );
    }
}
