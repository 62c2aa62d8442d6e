//! Embedding, motion-aware sequence blocks, and the U-Net assembly.
//!
//! The model consumes a voxelized multi-scan cloud as one long sequence in
//! space-filling-curve order. Immediately after voxelization the rows are
//! reordered once into the first pattern's serialized order (the canonical
//! order); every cross-row reduction (batch statistics, pooling, centroids)
//! happens in that canonical order, so the network's output is invariant to
//! how the input points were ordered. Each block gathers the rows into its
//! own pattern's order, runs, and gathers back.
//!
//! A block is pre-norm residual: position encoding, then the gated
//! state-space mixer, then a pointwise MLP. The mixer combines a per-scan
//! appearance branch (reversed aggregation, convolution within each scan)
//! with a cross-scan branch (convolution along the full sequence) through
//! sigmoid cross-product attention, feeds the fusion to a selective scan,
//! and gates the result before the output projection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{voxelize, SpatioTemporalCloud};
use crate::error::{Error, Result};
use crate::serialization::{
    serialize_coords, SerializationPattern, SerializedSequence, DEFAULT_BITS,
};
use crate::ssm_kernel::{init_ssm_arrays, selective_scan, SsmParams};
use crate::tensor_core::{DenseArray, Tape, ValueId};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. `widths`, `enc_depths` are per encoder
/// stage; `dec_depths` has one entry fewer (the bottleneck has no decoder
/// mirror). Stage `s+1` lives on a grid coarsened by factor 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub n_state: usize,
    pub expand: usize,
    pub kernel_width: usize,
    pub widths: Vec<usize>,
    pub enc_depths: Vec<usize>,
    pub dec_depths: Vec<usize>,
    pub grid_size: f64,
    pub num_scans: usize,
    pub patterns: Vec<SerializationPattern>,
    pub ssm_skip: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            n_state: 16,
            expand: 2,
            kernel_width: 3,
            widths: vec![32, 64, 128, 256, 256],
            enc_depths: vec![2, 2, 2, 6, 2],
            dec_depths: vec![2, 2, 2, 2],
            grid_size: 0.09,
            num_scans: 8,
            patterns: SerializationPattern::ALL.to_vec(),
            ssm_skip: true,
            seed: 0,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config {
        path: "model config".into(),
        msg: msg.into(),
    }
}

impl ModelConfig {
    /// A small two-stage configuration for tests and desk-scale training.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            widths: vec![16, 32],
            enc_depths: vec![1, 1],
            dec_depths: vec![1],
            n_state: 8,
            num_scans: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.enc_depths.len() {
            return Err(config_err(format!(
                "widths ({}) must match encoder depths ({})",
                self.widths.len(),
                self.enc_depths.len()
            )));
        }
        if self.dec_depths.len() + 1 != self.enc_depths.len() {
            return Err(config_err(format!(
                "decoder depths ({}) must be encoder depths ({}) minus one",
                self.dec_depths.len(),
                self.enc_depths.len()
            )));
        }
        if self.widths.contains(&0)
            || self.enc_depths.contains(&0)
            || self.dec_depths.contains(&0)
        {
            return Err(config_err("widths and depths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(config_err("need at least two classes"));
        }
        if self.kernel_width.is_multiple_of(2) || self.kernel_width == 0 {
            return Err(config_err("kernel width must be odd"));
        }
        if self.n_state == 0 || self.expand == 0 || self.num_scans == 0 {
            return Err(config_err("n_state, expand, num_scans must be positive"));
        }
        if !(self.grid_size > 0.0) {
            return Err(config_err("grid size must be positive"));
        }
        if self.patterns.is_empty() {
            return Err(Error::EmptyPatternList);
        }
        Ok(())
    }

    /// FNV-1a digest of the canonical textual form; stored in checkpoints so
    /// weights cannot silently load into a different architecture.
    pub fn digest(&self) -> u64 {
        let patterns: Vec<&str> = self.patterns.iter().map(|p| p.name()).collect();
        let text = format!(
            "num_classes={}\nn_state={}\nexpand={}\nkernel_width={}\nwidths={:?}\n\
             enc_depths={:?}\ndec_depths={:?}\ngrid_size={}\nnum_scans={}\n\
             patterns={}\nssm_skip={}\n",
            self.num_classes,
            self.n_state,
            self.expand,
            self.kernel_width,
            self.widths,
            self.enc_depths,
            self.dec_depths,
            self.grid_size,
            self.num_scans,
            patterns.join(","),
            self.ssm_skip,
        );
        fnv1a64(text.as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named parameter arrays, iterated in lexicographic order everywhere so
/// optimizer updates and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    arrays: BTreeMap<String, DenseArray>,
}

impl Params {
    pub fn new() -> Params {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: DenseArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.arrays.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn to_map(&self) -> &BTreeMap<String, DenseArray> {
        &self.arrays
    }

    pub fn from_map(arrays: BTreeMap<String, DenseArray>) -> Params {
        Params { arrays }
    }

    /// Fresh model parameters. Weights draw uniform `±1/sqrt(fan_in)`;
    /// biases start at zero; norm scales at one. The final projection of
    /// every residual branch starts at zero, so each block is the identity
    /// map at initialization and training opens the branches gradually.
    pub fn init(config: &ModelConfig) -> Result<Params> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Params::new();
        let kw = config.kernel_width;

        let w0 = config.widths[0];
        init_conv(&mut p, &mut rng, "embed.spatial", kw, 3, w0);
        init_conv(&mut p, &mut rng, "embed.temporal", kw, 1, w0);
        init_conv(&mut p, &mut rng, "embed.tguide", kw, w0, w0);
        init_conv(&mut p, &mut rng, "embed.fuse", kw, w0, w0);
        p.insert("embed.bn.gamma", DenseArray::full(&[w0], 1.0));
        p.insert("embed.bn.beta", DenseArray::zeros(&[w0]));

        let stages = config.widths.len();
        for s in 0..stages {
            if s > 0 {
                init_linear(
                    &mut p,
                    &mut rng,
                    &format!("down{s}"),
                    config.widths[s - 1],
                    config.widths[s],
                );
            }
            for i in 0..config.enc_depths[s] {
                init_block(&mut p, &mut rng, &format!("enc{s}.{i}."), config, s);
            }
        }
        for s in (0..stages - 1).rev() {
            init_linear(
                &mut p,
                &mut rng,
                &format!("up{s}"),
                config.widths[s + 1],
                config.widths[s],
            );
            for i in 0..config.dec_depths[s] {
                init_block(&mut p, &mut rng, &format!("dec{s}.{i}."), config, s);
            }
        }
        p.insert("final_ln.gamma", DenseArray::full(&[w0], 1.0));
        p.insert("final_ln.beta", DenseArray::zeros(&[w0]));
        init_linear(&mut p, &mut rng, "head", w0, config.num_classes);
        Ok(p)
    }
}

fn uniform_array(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> DenseArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    DenseArray::from_vec(shape, data)
}

fn init_conv(p: &mut Params, rng: &mut ChaCha8Rng, name: &str, kw: usize, cin: usize, cout: usize) {
    p.insert(
        format!("{name}.k"),
        uniform_array(rng, &[kw, cin, cout], kw * cin),
    );
    p.insert(format!("{name}.b"), DenseArray::zeros(&[cout]));
}

fn init_linear(p: &mut Params, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) {
    p.insert(
        format!("{name}.weight"),
        uniform_array(rng, &[cin, cout], cin),
    );
    p.insert(format!("{name}.bias"), DenseArray::zeros(&[cout]));
}

fn init_block(p: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, config: &ModelConfig, stage: usize) {
    let w = config.widths[stage];
    let inner = config.expand * w;
    let kw = config.kernel_width;

    // Position encoding: depthwise conv and the closing MLP layer start at
    // zero so the branch contributes nothing until trained.
    p.insert(format!("{prefix}pos.dw.k"), DenseArray::zeros(&[kw, w]));
    p.insert(format!("{prefix}pos.dw.b"), DenseArray::zeros(&[w]));
    init_linear(p, rng, &format!("{prefix}pos.mlp1"), 3, w);
    p.insert(format!("{prefix}pos.mlp2.weight"), DenseArray::zeros(&[w, w]));
    p.insert(format!("{prefix}pos.mlp2.bias"), DenseArray::zeros(&[w]));

    p.insert(format!("{prefix}ln1.gamma"), DenseArray::full(&[w], 1.0));
    p.insert(format!("{prefix}ln1.beta"), DenseArray::zeros(&[w]));

    init_conv(p, rng, &format!("{prefix}mixer.upper"), kw, w, inner);
    init_conv(p, rng, &format!("{prefix}mixer.middle"), kw, w, inner);
    init_linear(p, rng, &format!("{prefix}mixer.gate"), w, inner);
    for (suffix, arr) in init_ssm_arrays(inner, config.n_state, rng) {
        p.insert(format!("{prefix}mixer.ssm.{suffix}"), arr);
    }
    p.insert(
        format!("{prefix}mixer.out.weight"),
        DenseArray::zeros(&[inner, w]),
    );
    p.insert(format!("{prefix}mixer.out.bias"), DenseArray::zeros(&[w]));

    p.insert(format!("{prefix}ln2.gamma"), DenseArray::full(&[w], 1.0));
    p.insert(format!("{prefix}ln2.beta"), DenseArray::zeros(&[w]));
    init_linear(p, rng, &format!("{prefix}mlp.fc1"), w, 2 * w);
    p.insert(
        format!("{prefix}mlp.fc2.weight"),
        DenseArray::zeros(&[2 * w, w]),
    );
    p.insert(format!("{prefix}mlp.fc2.bias"), DenseArray::zeros(&[w]));
}

/// Parameter arrays registered on a tape as differentiable leaves.
pub struct BoundParams {
    ids: BTreeMap<String, ValueId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> ValueId {
        match self.ids.get(name) {
            Some(&id) => id,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = (&String, ValueId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }

    pub fn from_ids(names: &[String], ids: &[ValueId]) -> BoundParams {
        assert_eq!(names.len(), ids.len());
        BoundParams {
            ids: names.iter().cloned().zip(ids.iter().cloned()).collect(),
        }
    }
}

/// Puts every parameter on the tape, in name order.
pub fn bind_params(tape: &mut Tape, params: &Params) -> Result<BoundParams> {
    let mut ids = BTreeMap::new();
    for (name, array) in params.iter() {
        ids.insert(name.clone(), tape.leaf(array.clone())?);
    }
    Ok(BoundParams { ids })
}

struct Scope<'a> {
    bp: &'a BoundParams,
    prefix: &'a str,
}

impl Scope<'_> {
    fn id(&self, suffix: &str) -> ValueId {
        self.bp.id(&format!("{}{}", self.prefix, suffix))
    }
}

/// Intermediates of the embedding, exposed for the algebra tests.
pub struct EmbedTrace {
    pub spatial: ValueId,
    pub temporal: ValueId,
    /// `(f_t + f_s) + Conv(f_t) ⊙ f_s`, before the closing convolution.
    pub fused: ValueId,
    pub out: ValueId,
}

/// Embeds coordinates and scan times into `widths[0]` channels.
///
/// The temporal features gate the spatial ones: the fusion is
/// `(f_t + f_s) + Conv(f_t) ⊙ f_s`, then a closing convolution with batch
/// norm and SiLU. All convolutions run along the serialized order within
/// `segments`.
pub fn embed_forward(
    tape: &mut Tape,
    coords: ValueId,
    times: ValueId,
    bp: &BoundParams,
    segments: &[usize],
) -> Result<EmbedTrace> {
    let s = Scope { bp, prefix: "embed." };
    let f_s = tape.conv1d(coords, s.id("spatial.k"), s.id("spatial.b"), segments)?;
    let f_t = tape.conv1d(times, s.id("temporal.k"), s.id("temporal.b"), segments)?;
    let summed = tape.add(f_t, f_s)?;
    let guide = tape.conv1d(f_t, s.id("tguide.k"), s.id("tguide.b"), segments)?;
    let gated = tape.mul(guide, f_s)?;
    let fused = tape.add(summed, gated)?;
    let pre = tape.conv1d(fused, s.id("fuse.k"), s.id("fuse.b"), segments)?;
    let bn = tape.batch_norm(pre, s.id("bn.gamma"), s.id("bn.beta"), BN_EPS)?;
    let out = tape.silu(bn)?;
    Ok(EmbedTrace {
        spatial: f_s,
        temporal: f_t,
        fused,
        out,
    })
}

/// Row bookkeeping for reversed aggregation: where each sequence row lands
/// in the per-scan padded layout, and the conv segments that keep real rows
/// and padding from ever sharing a window.
pub struct RaLayout {
    pub n_scans: usize,
    pub pad_len: usize,
    /// Per input row, its slot in the `[n_scans * pad_len]` padded layout.
    pub slot_of_row: Vec<usize>,
    /// Alternating real-run / pad-run lengths, one pair per scan.
    pub segments: Vec<usize>,
    /// True for slots that hold a real row.
    pub mask: Vec<bool>,
}

/// Computes the padded layout for rows in sequence order. Rows of scan `t`
/// keep their sequence order inside subsequence `t`, zero-padded to the
/// largest scan count.
pub fn ra_layout(scan_ids: &[u32], n_scans: usize) -> Result<RaLayout> {
    let mut counts = vec![0usize; n_scans];
    for &t in scan_ids {
        if t as usize >= n_scans {
            return Err(Error::CountMismatch {
                what: "scan id beyond scan count",
                got: t as usize,
                expected: n_scans,
            });
        }
        counts[t as usize] += 1;
    }
    let pad_len = counts.iter().cloned().max().unwrap_or(0);
    let mut next = vec![0usize; n_scans];
    let mut slot_of_row = Vec::with_capacity(scan_ids.len());
    for &t in scan_ids {
        let t = t as usize;
        slot_of_row.push(t * pad_len + next[t]);
        next[t] += 1;
    }
    let mut segments = Vec::with_capacity(2 * n_scans);
    let mut mask = vec![false; n_scans * pad_len];
    for (t, &c) in counts.iter().enumerate() {
        segments.push(c);
        segments.push(pad_len - c);
        for slot in mask.iter_mut().skip(t * pad_len).take(c) {
            *slot = true;
        }
    }
    Ok(RaLayout {
        n_scans,
        pad_len,
        slot_of_row,
        segments,
        mask,
    })
}

/// Splits the aggregated sequence into per-scan subsequences, zero-padded to
/// a common length (`[n_scans * pad_len, C]`).
pub fn reversed_aggregation(tape: &mut Tape, x: ValueId, layout: &RaLayout) -> Result<ValueId> {
    tape.scatter_rows(x, &layout.slot_of_row, layout.n_scans * layout.pad_len)
}

/// Exact inverse of [`reversed_aggregation`] on the real slots.
pub fn inverse_ra(tape: &mut Tape, padded: ValueId, layout: &RaLayout) -> Result<ValueId> {
    tape.gather_rows(padded, &layout.slot_of_row)
}

/// Branch intermediates of the mixer, exposed for the algebra tests.
pub struct MixerTrace {
    /// Upper (appearance) branch after re-aggregation, `[N, inner]`.
    pub upper: ValueId,
    /// Middle (motion) branch, `[N, inner]`.
    pub middle: ValueId,
    /// `Sigmoid(middle) ⊗ upper + middle`.
    pub fused: ValueId,
    /// Output gate in `(0, 1)`.
    pub gate: ValueId,
    /// Selective-scan output before gating.
    pub ssm: ValueId,
    /// Final projection back to the block width.
    pub out: ValueId,
}

/// The motion-aware mixer.
///
/// Appearance: rows are regrouped per scan (reversed aggregation), convolved
/// within each scan, SiLU-activated, and scattered back to sequence order.
/// Motion: a convolution along the full multi-scan sequence. The two fuse as
/// `Sigmoid(middle) ⊗ upper + middle`, pass through a selective scan, and a
/// sigmoid gate of the block input scales the result before the output
/// projection.
pub fn mixer_forward(
    tape: &mut Tape,
    x: ValueId,
    bp: &BoundParams,
    prefix: &str,
    scan_ids: &[u32],
    n_scans: usize,
    ssm_skip: bool,
) -> Result<MixerTrace> {
    let rows = tape.value(x).rows();
    let name = format!("{prefix}mixer.");
    let s = Scope { bp, prefix: &name };

    let layout = ra_layout(scan_ids, n_scans)?;
    let padded = reversed_aggregation(tape, x, &layout)?;
    let upper_conv = tape.conv1d(padded, s.id("upper.k"), s.id("upper.b"), &layout.segments)?;
    let upper_act = tape.silu(upper_conv)?;
    let upper = inverse_ra(tape, upper_act, &layout)?;

    let middle = tape.conv1d(x, s.id("middle.k"), s.id("middle.b"), &[rows])?;

    let middle_sig = tape.sigmoid(middle)?;
    let cross = tape.mul(middle_sig, upper)?;
    let fused = tape.add(cross, middle)?;

    let gate_pre = tape.linear(x, s.id("gate.weight"), s.id("gate.bias"))?;
    let gate = tape.sigmoid(gate_pre)?;

    let ssm_params = SsmParams {
        a_log: s.id("ssm.a_log"),
        w_delta: s.id("ssm.w_delta"),
        delta_bias: s.id("ssm.delta_bias"),
        w_b: s.id("ssm.w_b"),
        w_c: s.id("ssm.w_c"),
        d: if ssm_skip { Some(s.id("ssm.d")) } else { None },
    };
    let scan_in = tape.silu(fused)?;
    let ssm = selective_scan(tape, scan_in, &ssm_params, &[rows])?;
    let gated = tape.mul(ssm, gate)?;
    let out = tape.linear(gated, s.id("out.weight"), s.id("out.bias"))?;
    Ok(MixerTrace {
        upper,
        middle,
        fused,
        gate,
        ssm,
        out,
    })
}

/// Static geometry of one resolution stage, stored in canonical order (the
/// first pattern's serialized order).
pub struct StageGeometry {
    pub coords: Vec<[i64; 3]>,
    pub times: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    /// Metric coordinates centered on the stage mean, `[N, 3]`.
    pub rel_coords: DenseArray,
    /// One serialized order per configured pattern; index 0 is the identity.
    pub orders: Vec<SerializedSequence>,
}

impl StageGeometry {
    /// Builds the stage, returning it along with the canonical permutation
    /// (`perm[j]` = index of the row, in the caller's ordering, that ends up
    /// at canonical position `j`).
    pub fn build(
        coords: Vec<[i64; 3]>,
        times: Vec<u32>,
        positions: Vec<[f64; 3]>,
        patterns: &[SerializationPattern],
    ) -> Result<(StageGeometry, Vec<usize>)> {
        if patterns.is_empty() {
            return Err(Error::EmptyPatternList);
        }
        let canonical = serialize_coords(&coords, &times, patterns[0], DEFAULT_BITS)?;
        let perm = canonical.order.clone();
        let coords: Vec<[i64; 3]> = perm.iter().map(|&i| coords[i]).collect();
        let times: Vec<u32> = perm.iter().map(|&i| times[i]).collect();
        let positions: Vec<[f64; 3]> = perm.iter().map(|&i| positions[i]).collect();

        let n = coords.len();
        let mut mean = [0.0f64; 3];
        for p in &positions {
            for a in 0..3 {
                mean[a] += p[a];
            }
        }
        if n > 0 {
            for m in &mut mean {
                *m /= n as f64;
            }
        }
        let rel: Vec<f64> = positions
            .iter()
            .flat_map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]])
            .collect();

        let orders: Vec<SerializedSequence> = patterns
            .iter()
            .map(|&p| serialize_coords(&coords, &times, p, DEFAULT_BITS))
            .collect::<Result<_>>()?;
        Ok((
            StageGeometry {
                coords,
                times,
                positions,
                rel_coords: DenseArray::from_vec(&[n, 3], rel),
                orders,
            },
            perm,
        ))
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Parent/child maps of one pooling step (grid coarsened by 2, scan identity
/// preserved).
pub struct PoolStep {
    /// Gather permutation putting children contiguous by parent, parents in
    /// canonical order.
    pub child_sort: Vec<usize>,
    /// Children per parent, aligned with the sorted layout.
    pub seg_lens: Vec<usize>,
    /// Per child (canonical row), the canonical row of its parent.
    pub child_parent: Vec<usize>,
}

/// Halves the grid (`coord >> 1` per axis, floor semantics for negatives)
/// and groups stage rows under their parent cells. Parent positions are the
/// mean of their children's.
pub fn build_pool(
    stage: &StageGeometry,
    patterns: &[SerializationPattern],
) -> Result<(PoolStep, StageGeometry)> {
    let n = stage.len();
    let mut parent_index: BTreeMap<([i64; 3], u32), usize> = BTreeMap::new();
    let mut parent_keys = Vec::new();
    for i in 0..n {
        let pc = [
            stage.coords[i][0] >> 1,
            stage.coords[i][1] >> 1,
            stage.coords[i][2] >> 1,
        ];
        let key = (pc, stage.times[i]);
        let next = parent_index.len();
        let slot = *parent_index.entry(key).or_insert(next);
        if slot == parent_keys.len() {
            parent_keys.push(key);
        }
    }
    let m = parent_keys.len();
    let mut sums = vec![[0.0f64; 3]; m];
    let mut counts = vec![0usize; m];
    let mut child_raw_parent = vec![0usize; n];
    for i in 0..n {
        let pc = [
            stage.coords[i][0] >> 1,
            stage.coords[i][1] >> 1,
            stage.coords[i][2] >> 1,
        ];
        let slot = parent_index[&(pc, stage.times[i])];
        child_raw_parent[i] = slot;
        for a in 0..3 {
            sums[slot][a] += stage.positions[i][a];
        }
        counts[slot] += 1;
    }
    let parent_positions: Vec<[f64; 3]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
        .collect();
    let parent_coords: Vec<[i64; 3]> = parent_keys.iter().map(|(c, _)| *c).collect();
    let parent_times: Vec<u32> = parent_keys.iter().map(|(_, t)| *t).collect();

    let (parent_stage, parent_perm) =
        StageGeometry::build(parent_coords, parent_times, parent_positions, patterns)?;
    // parent_perm maps canonical parent row -> raw slot; invert it.
    let mut canon_of_raw = vec![0usize; m];
    for (canon, &raw) in parent_perm.iter().enumerate() {
        canon_of_raw[raw] = canon;
    }
    let child_parent: Vec<usize> = child_raw_parent.iter().map(|&r| canon_of_raw[r]).collect();

    let mut child_sort: Vec<usize> = (0..n).collect();
    child_sort.sort_by_key(|&i| child_parent[i]);
    let mut seg_lens = vec![0usize; m];
    for &p in &child_parent {
        seg_lens[p] += 1;
    }
    Ok((
        PoolStep {
            child_sort,
            seg_lens,
            child_parent,
        },
        parent_stage,
    ))
}

/// One pre-norm residual block at a given stage, using the serialized order
/// `stage.orders[pattern_idx]`.
///
/// `x' = x + PosEnc(x)`, `x'' = x' + Mixer(LN(x'))`, `out = x'' + MLP(LN(x''))`.
/// The position encoding is a depthwise convolution along the curve plus a
/// two-layer MLP of the centered metric coordinates.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    x: ValueId,
    bp: &BoundParams,
    prefix: &str,
    stage: &StageGeometry,
    pattern_idx: usize,
    n_scans: usize,
    ssm_skip: bool,
) -> Result<ValueId> {
    let s = Scope { bp, prefix };
    let ord = &stage.orders[pattern_idx];
    let rows = stage.len();

    let xp = tape.gather_rows(x, &ord.order)?;
    let rel: Vec<f64> = ord
        .order
        .iter()
        .flat_map(|&i| {
            let d = stage.rel_coords.data();
            [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]]
        })
        .collect();
    let rel = tape.constant(DenseArray::from_vec(&[rows, 3], rel))?;
    let scan_ids: Vec<u32> = ord.order.iter().map(|&i| stage.times[i]).collect();

    let dw = tape.conv1d_depthwise(xp, s.id("pos.dw.k"), s.id("pos.dw.b"), &[rows])?;
    let h = tape.linear(rel, s.id("pos.mlp1.weight"), s.id("pos.mlp1.bias"))?;
    let h = tape.silu(h)?;
    let mlp_pos = tape.linear(h, s.id("pos.mlp2.weight"), s.id("pos.mlp2.bias"))?;
    let pe = tape.add(dw, mlp_pos)?;
    let x1 = tape.add(xp, pe)?;

    let norm1 = tape.layer_norm(x1, s.id("ln1.gamma"), s.id("ln1.beta"), LN_EPS)?;
    let mixer = mixer_forward(tape, norm1, bp, prefix, &scan_ids, n_scans, ssm_skip)?;
    let x2 = tape.add(x1, mixer.out)?;

    let norm2 = tape.layer_norm(x2, s.id("ln2.gamma"), s.id("ln2.beta"), LN_EPS)?;
    let h = tape.linear(norm2, s.id("mlp.fc1.weight"), s.id("mlp.fc1.bias"))?;
    let h = tape.silu(h)?;
    let h = tape.linear(h, s.id("mlp.fc2.weight"), s.id("mlp.fc2.bias"))?;
    let x3 = tape.add(x2, h)?;

    tape.gather_rows(x3, &ord.inverse)
}

/// Everything the trainer needs from one forward pass.
pub struct ModelOutput {
    /// `[num_points, num_classes]`, aligned with the input point order.
    pub point_logits: ValueId,
    /// `[num_voxels, num_classes]` in canonical voxel order.
    pub voxel_logits: ValueId,
    /// Scan id per canonical voxel row.
    pub voxel_times: Vec<u32>,
    /// Canonical voxel row -> index in the voxelizer's output order.
    pub voxel_order: Vec<usize>,
    /// Per input point, its canonical voxel row.
    pub point_rows: Vec<usize>,
}

/// The full segmentation network.
pub struct SegModel {
    pub config: ModelConfig,
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<SegModel> {
        config.validate()?;
        Ok(SegModel { config })
    }

    /// Voxelizes the cloud, runs the U-Net over the serialized voxel
    /// sequence, and maps voxel logits back to the input points.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        cloud: &SpatioTemporalCloud,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let (vox, grid) = voxelize(cloud, cfg.grid_size);
        let (stage0, perm0) = StageGeometry::build(
            grid.voxel_coords.clone(),
            vox.scan_ids.clone(),
            vox.positions.clone(),
            &cfg.patterns,
        )?;
        let n0 = stage0.len();

        // Embedding inputs: centered metric coordinates and normalized time.
        let coords = tape.constant(stage0.rel_coords.clone())?;
        let t_norm = if cfg.num_scans > 1 {
            (cfg.num_scans - 1) as f64
        } else {
            1.0
        };
        let times_data: Vec<f64> = stage0.times.iter().map(|&t| t as f64 / t_norm).collect();
        let times = tape.constant(DenseArray::from_vec(&[n0, 1], times_data))?;
        let embed = embed_forward(tape, coords, times, bp, &[n0])?;

        let n_stages = cfg.widths.len();
        let mut stages = vec![stage0];
        let mut pools: Vec<PoolStep> = Vec::new();
        let mut skips: Vec<ValueId> = Vec::new();
        let mut feats = embed.out;
        let mut block_counter = 0usize;

        for s in 0..n_stages {
            if s > 0 {
                let (pool, parent_stage) = build_pool(&stages[s - 1], &cfg.patterns)?;
                let gathered = tape.gather_rows(feats, &pool.child_sort)?;
                let pooled = tape.segment_max(gathered, &pool.seg_lens)?;
                feats = tape.linear(
                    pooled,
                    bp.id(&format!("down{s}.weight")),
                    bp.id(&format!("down{s}.bias")),
                )?;
                pools.push(pool);
                stages.push(parent_stage);
            }
            for i in 0..cfg.enc_depths[s] {
                feats = block_forward(
                    tape,
                    feats,
                    bp,
                    &format!("enc{s}.{i}."),
                    &stages[s],
                    block_counter % cfg.patterns.len(),
                    cfg.num_scans,
                    cfg.ssm_skip,
                )?;
                block_counter += 1;
            }
            if s < n_stages - 1 {
                skips.push(feats);
            }
        }

        for s in (0..n_stages - 1).rev() {
            let up = tape.linear(
                feats,
                bp.id(&format!("up{s}.weight")),
                bp.id(&format!("up{s}.bias")),
            )?;
            let spread = tape.gather_rows(up, &pools[s].child_parent)?;
            feats = tape.add(spread, skips[s])?;
            for i in 0..cfg.dec_depths[s] {
                feats = block_forward(
                    tape,
                    feats,
                    bp,
                    &format!("dec{s}.{i}."),
                    &stages[s],
                    block_counter % cfg.patterns.len(),
                    cfg.num_scans,
                    cfg.ssm_skip,
                )?;
                block_counter += 1;
            }
        }

        let normed = tape.layer_norm(feats, bp.id("final_ln.gamma"), bp.id("final_ln.beta"), LN_EPS)?;
        let voxel_logits = tape.linear(normed, bp.id("head.weight"), bp.id("head.bias"))?;

        let mut canon_of = vec![0usize; n0];
        for (canon, &orig) in perm0.iter().enumerate() {
            canon_of[orig] = canon;
        }
        let point_rows: Vec<usize> = grid.point_to_voxel.iter().map(|&v| canon_of[v]).collect();
        let point_logits = tape.gather_rows(voxel_logits, &point_rows)?;
        Ok(ModelOutput {
            point_logits,
            voxel_logits,
            voxel_times: stages[0].times.clone(),
            voxel_order: perm0,
            point_rows,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MOSCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes named arrays with the config digest they belong to.
pub fn save_checkpoint(
    path: &Path,
    config_digest: u64,
    arrays: &BTreeMap<String, DenseArray>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    out(CHECKPOINT_MAGIC)?;
    out(&CHECKPOINT_VERSION.to_le_bytes())?;
    out(&config_digest.to_le_bytes())?;
    out(&(arrays.len() as u32).to_le_bytes())?;
    for (name, arr) in arrays {
        out(&(name.len() as u32).to_le_bytes())?;
        out(name.as_bytes())?;
        out(&(arr.shape().len() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            out(&(d as u32).to_le_bytes())?;
        }
        for &v in arr.data() {
            out(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, refusing one written for a different config digest.
pub fn load_checkpoint(path: &Path, expected_digest: u64) -> Result<BTreeMap<String, DenseArray>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadCheckpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("magic bytes do not match".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let stored = read_u64(&mut r)?;
    if stored != expected_digest {
        return Err(Error::ConfigDigestMismatch {
            stored,
            expected: expected_digest,
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::BadCheckpoint(format!(
                "implausible name length {name_len}"
            )));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::BadCheckpoint("truncated name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::BadCheckpoint("name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(Error::BadCheckpoint(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::BadCheckpoint(format!("truncated data for {name}")))?;
            data.push(f64::from_le_bytes(b));
        }
        arrays.insert(name, DenseArray::from_vec(&shape, data));
    }
    Ok(arrays)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::BadCheckpoint("truncated integer field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::BadCheckpoint("truncated integer field".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor_core::finite_diff_check;

    fn small_cloud(n: usize, scans: usize, seed: u64) -> SpatioTemporalCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = n / scans;
        let mut positions = Vec::new();
        let mut scan_ids = Vec::new();
        let mut counts = Vec::new();
        for t in 0..scans {
            for _ in 0..per {
                positions.push([
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-0.5..0.5),
                ]);
                scan_ids.push(t as u32);
            }
            counts.push(per);
        }
        SpatioTemporalCloud {
            positions,
            scan_ids,
            counts_per_scan: counts,
        }
    }

    /// Params with every zero-initialized branch opened by noise, so
    /// gradient paths through the whole block are live.
    fn noisy_params(cfg: &ModelConfig, seed: u64) -> Params {
        let mut p = Params::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, arr) in p.iter_mut() {
            for v in arr.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        p
    }

    #[test]
    fn config_digest_tracks_architecture() {
        let a = ModelConfig::toy();
        let mut b = ModelConfig::toy();
        assert_eq!(a.digest(), b.digest());
        b.widths[0] += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn config_validation_catches_depth_mismatch() {
        let mut cfg = ModelConfig::toy();
        cfg.dec_depths.push(1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embedding_identity_kernels_expose_the_fusion_formula() {
        // Temporal convs act as identities: the temporal kernel's center tap
        // broadcasts the scalar time to all channels, the guide conv's
        // center tap is the identity matrix. Then the pre-head fusion must
        // be exactly f_t + f_s + f_t * f_s.
        let cfg = ModelConfig {
            widths: vec![4],
            enc_depths: vec![1],
            dec_depths: vec![],
            ..ModelConfig::toy()
        };
        let mut params = Params::init(&cfg).unwrap();
        let kw = cfg.kernel_width;
        let w = 4;
        let mut temporal = DenseArray::zeros(&[kw, 1, w]);
        for c in 0..w {
            temporal.data_mut()[(kw / 2) * w + c] = 1.0;
        }
        params.insert("embed.temporal.k", temporal);
        let mut guide = DenseArray::zeros(&[kw, w, w]);
        for c in 0..w {
            guide.data_mut()[((kw / 2) * w + c) * w + c] = 1.0;
        }
        params.insert("embed.tguide.k", guide);

        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let coords = tape
            .leaf(DenseArray::from_vec(
                &[n, 3],
                (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let times = tape
            .leaf(DenseArray::from_vec(
                &[n, 1],
                (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            ))
            .unwrap();
        let trace = embed_forward(&mut tape, coords, times, &bp, &[n]).unwrap();

        let sum = tape.add(trace.temporal, trace.spatial).unwrap();
        let prod = tape.mul(trace.temporal, trace.spatial).unwrap();
        let want = tape.add(sum, prod).unwrap();
        assert_eq!(tape.value(trace.fused).data(), tape.value(want).data());
    }

    #[test]
    fn embedding_zero_times_reduce_to_spatial_term() {
        let cfg = ModelConfig {
            widths: vec![4],
            enc_depths: vec![1],
            dec_depths: vec![],
            ..ModelConfig::toy()
        };
        let params = Params::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 6;
        let coords = tape
            .leaf(DenseArray::from_vec(
                &[n, 3],
                (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let times = tape.leaf(DenseArray::zeros(&[n, 1])).unwrap();
        let trace = embed_forward(&mut tape, coords, times, &bp, &[n]).unwrap();
        assert_eq!(tape.value(trace.fused).data(), tape.value(trace.spatial).data());
    }

    #[test]
    fn ra_layout_pads_to_the_largest_scan() {
        // Counts [3, 2]: pad to 3, so the layout is [2 scans, 3 slots] with
        // one masked slot at the end.
        let layout = ra_layout(&[0, 0, 1, 0, 1], 2).unwrap();
        assert_eq!(layout.pad_len, 3);
        assert_eq!(layout.slot_of_row, vec![0, 1, 3, 2, 4]);
        assert_eq!(layout.segments, vec![3, 0, 2, 1]);
        assert_eq!(layout.mask, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn ra_single_scan_is_identity() {
        let layout = ra_layout(&[0, 0, 0], 1).unwrap();
        assert_eq!(layout.pad_len, 3);
        assert_eq!(layout.slot_of_row, vec![0, 1, 2]);
        assert!(layout.mask.iter().all(|&m| m));

        let mut tape = Tape::new();
        let x = tape
            .leaf(DenseArray::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let padded = reversed_aggregation(&mut tape, x, &layout).unwrap();
        assert_eq!(tape.value(padded).data(), tape.value(x).data());
    }

    #[test]
    fn ra_round_trips_on_real_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scan_ids = [0u32, 1, 0, 2, 1, 0, 2];
        let layout = ra_layout(&scan_ids, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .leaf(DenseArray::from_vec(
                &[7, 2],
                (0..14).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let padded = reversed_aggregation(&mut tape, x, &layout).unwrap();
        let back = inverse_ra(&mut tape, padded, &layout).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn padding_never_leaks_into_real_rows() {
        // Convolve the padded layout, then perturb only the padded slots and
        // convolve again: the re-aggregated rows must match exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scan_ids = [0u32, 0, 0, 1, 1, 2];
        let layout = ra_layout(&scan_ids, 3).unwrap();
        let rows = scan_ids.len();
        let mut tape = Tape::new();
        let x = tape
            .leaf(DenseArray::from_vec(
                &[rows, 2],
                (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let k = tape
            .leaf(DenseArray::from_vec(
                &[3, 2, 2],
                (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let b = tape.leaf(DenseArray::zeros(&[2])).unwrap();

        let padded = reversed_aggregation(&mut tape, x, &layout).unwrap();
        let noise: Vec<f64> = layout
            .mask
            .iter()
            .flat_map(|&real| {
                let v = if real { 0.0 } else { rng.random_range(1.0..2.0) };
                [v, v]
            })
            .collect();
        let noise = tape
            .constant(DenseArray::from_vec(&[layout.mask.len(), 2], noise))
            .unwrap();
        let perturbed = tape.add(padded, noise).unwrap();

        let clean = tape.conv1d(padded, k, b, &layout.segments).unwrap();
        let dirty = tape.conv1d(perturbed, k, b, &layout.segments).unwrap();
        let clean_back = inverse_ra(&mut tape, clean, &layout).unwrap();
        let dirty_back = inverse_ra(&mut tape, dirty, &layout).unwrap();
        assert_eq!(tape.value(clean_back).data(), tape.value(dirty_back).data());
    }

    fn mixer_fixture(seed: u64) -> (Tape, Params, ModelConfig, Vec<u32>) {
        let cfg = ModelConfig {
            widths: vec![4],
            enc_depths: vec![1],
            dec_depths: vec![],
            n_state: 4,
            num_scans: 2,
            ..ModelConfig::toy()
        };
        let params = noisy_params(&cfg, seed);
        (Tape::new(), params, cfg, vec![0, 0, 0, 1, 1, 1])
    }

    #[test]
    fn mixer_zeroed_middle_halves_the_upper_branch() {
        let (mut tape, mut params, _cfg, scans) = mixer_fixture(9);
        params.insert("enc0.0.mixer.middle.k", DenseArray::zeros(&[3, 4, 8]));
        params.insert("enc0.0.mixer.middle.b", DenseArray::zeros(&[8]));
        let bp = bind_params(&mut tape, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = tape
            .leaf(DenseArray::from_vec(
                &[6, 4],
                (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let trace = mixer_forward(&mut tape, x, &bp, "enc0.0.", &scans, 2, true).unwrap();
        let half_upper = tape.scale(trace.upper, 0.5).unwrap();
        assert_eq!(tape.value(trace.fused).data(), tape.value(half_upper).data());
    }

    #[test]
    fn mixer_zeroed_upper_leaves_the_middle_branch() {
        let (mut tape, mut params, _cfg, scans) = mixer_fixture(11);
        params.insert("enc0.0.mixer.upper.k", DenseArray::zeros(&[3, 4, 8]));
        params.insert("enc0.0.mixer.upper.b", DenseArray::zeros(&[8]));
        let bp = bind_params(&mut tape, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = tape
            .leaf(DenseArray::from_vec(
                &[6, 4],
                (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let trace = mixer_forward(&mut tape, x, &bp, "enc0.0.", &scans, 2, true).unwrap();
        assert_eq!(tape.value(trace.fused).data(), tape.value(trace.middle).data());
    }

    #[test]
    fn mixer_saturated_gate_passes_the_scan_branch() {
        // Gate bias +40 saturates the sigmoid to exactly 1.0 in f64, so the
        // output must equal the projected scan branch alone.
        let (mut tape, mut params, _cfg, scans) = mixer_fixture(13);
        params.insert("enc0.0.mixer.gate.weight", DenseArray::zeros(&[4, 8]));
        params.insert("enc0.0.mixer.gate.bias", DenseArray::full(&[8], 40.0));
        let bp = bind_params(&mut tape, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = tape
            .leaf(DenseArray::from_vec(
                &[6, 4],
                (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let trace = mixer_forward(&mut tape, x, &bp, "enc0.0.", &scans, 2, true).unwrap();
        assert!(tape.value(trace.gate).data().iter().all(|&g| g == 1.0));
        let direct = tape
            .linear(
                trace.ssm,
                bp.id("enc0.0.mixer.out.weight"),
                bp.id("enc0.0.mixer.out.bias"),
            )
            .unwrap();
        assert_eq!(tape.value(trace.out).data(), tape.value(direct).data());
    }

    fn toy_stage(n: usize, scans: u32, seed: u64, patterns: &[SerializationPattern]) -> StageGeometry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<[i64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-8..8),
                    rng.random_range(-8..8),
                    rng.random_range(-2..2),
                ]
            })
            .collect();
        let times: Vec<u32> = (0..n).map(|i| i as u32 % scans).collect();
        let positions: Vec<[f64; 3]> = coords
            .iter()
            .map(|c| [c[0] as f64 * 0.09, c[1] as f64 * 0.09, c[2] as f64 * 0.09])
            .collect();
        StageGeometry::build(coords, times, positions, patterns).unwrap().0
    }

    #[test]
    fn freshly_initialized_block_is_the_identity() {
        let cfg = ModelConfig {
            widths: vec![4],
            enc_depths: vec![1],
            dec_depths: vec![],
            n_state: 4,
            num_scans: 2,
            ..ModelConfig::toy()
        };
        let params = Params::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, &params).unwrap();
        let stage = toy_stage(10, 2, 15, &cfg.patterns);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = tape
            .leaf(DenseArray::from_vec(
                &[10, 4],
                (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ))
            .unwrap();
        let y = block_forward(&mut tape, x, &bp, "enc0.0.", &stage, 1, 2, true).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn pool_takes_the_per_channel_max() {
        // Two children in one parent cell with features [1] and [3]: the
        // pooled feature is 3.
        let patterns = SerializationPattern::ALL.to_vec();
        let (stage, _) = StageGeometry::build(
            vec![[0, 0, 0], [1, 0, 0]],
            vec![0, 0],
            vec![[0.0; 3], [0.09; 3]],
            &patterns,
        )
        .unwrap();
        let (pool, parent) = build_pool(&stage, &patterns).unwrap();
        assert_eq!(parent.len(), 1);
        assert_eq!(pool.seg_lens, vec![2]);
        let mut tape = Tape::new();
        let x = tape
            .leaf(DenseArray::from_vec(&[2, 1], vec![1.0, 3.0]))
            .unwrap();
        let g = tape.gather_rows(x, &pool.child_sort).unwrap();
        let m = tape.segment_max(g, &pool.seg_lens).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
    }

    #[test]
    fn pool_with_distinct_parents_is_a_bijection() {
        let patterns = SerializationPattern::ALL.to_vec();
        let (stage, _) = StageGeometry::build(
            vec![[0, 0, 0], [2, 0, 0], [4, 0, 0]],
            vec![0, 0, 0],
            vec![[0.0; 3], [0.2; 3], [0.4; 3]],
            &patterns,
        )
        .unwrap();
        let (pool, parent) = build_pool(&stage, &patterns).unwrap();
        assert_eq!(parent.len(), 3);
        assert!(pool.seg_lens.iter().all(|&l| l == 1));
        // Unpooling restores the original cardinality.
        assert_eq!(pool.child_parent.len(), stage.len());
    }

    #[test]
    fn pool_keeps_scans_apart() {
        let patterns = SerializationPattern::ALL.to_vec();
        let (stage, _) = StageGeometry::build(
            vec![[0, 0, 0], [1, 0, 0]],
            vec![0, 1],
            vec![[0.0; 3], [0.09; 3]],
            &patterns,
        )
        .unwrap();
        let (_, parent) = build_pool(&stage, &patterns).unwrap();
        // Same parent cell spatially, but different scans stay separate.
        assert_eq!(parent.len(), 2);
    }

    #[test]
    fn pool_halves_with_floor_semantics() {
        let patterns = vec![SerializationPattern::Zorder];
        let (stage, _) = StageGeometry::build(
            vec![[-1, 0, 0], [-2, 0, 0]],
            vec![0, 0],
            vec![[-0.09; 3], [-0.18; 3]],
            &patterns,
        )
        .unwrap();
        let (_, parent) = build_pool(&stage, &patterns).unwrap();
        // -1 >> 1 = -1 and -2 >> 1 = -1: both land in the same parent.
        assert_eq!(parent.len(), 1);
        assert_eq!(parent.coords[0], [-1, 0, 0]);
    }

    #[test]
    fn model_emits_per_point_logits() {
        let cfg = ModelConfig {
            widths: vec![8, 16],
            enc_depths: vec![1, 1],
            dec_depths: vec![1],
            n_state: 4,
            num_scans: 2,
            ..ModelConfig::toy()
        };
        let model = SegModel::new(cfg.clone()).unwrap();
        let params = Params::init(&cfg).unwrap();
        let cloud = small_cloud(50, 2, 17);
        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, &params).unwrap();
        let out = model.forward(&mut tape, &bp, &cloud).unwrap();
        let logits = tape.value(out.point_logits);
        assert_eq!(logits.shape(), [50, 3]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn permuting_input_points_permutes_logits_identically() {
        let cfg = ModelConfig {
            widths: vec![8, 16],
            enc_depths: vec![1, 1],
            dec_depths: vec![1],
            n_state: 4,
            num_scans: 2,
            ..ModelConfig::toy()
        };
        let model = SegModel::new(cfg.clone()).unwrap();
        let params = noisy_params(&cfg, 18);
        let cloud = small_cloud(40, 2, 19);

        // Permute points within each scan (scan blocks must stay contiguous).
        let mut perm: Vec<usize> = (0..20).rev().collect();
        perm.extend((20..40).rev());
        let permuted = SpatioTemporalCloud {
            positions: perm.iter().map(|&i| cloud.positions[i]).collect(),
            scan_ids: perm.iter().map(|&i| cloud.scan_ids[i]).collect(),
            counts_per_scan: cloud.counts_per_scan.clone(),
        };

        let mut tape_a = Tape::new();
        let bp_a = bind_params(&mut tape_a, &params).unwrap();
        let out_a = model.forward(&mut tape_a, &bp_a, &cloud).unwrap();
        let mut tape_b = Tape::new();
        let bp_b = bind_params(&mut tape_b, &params).unwrap();
        let out_b = model.forward(&mut tape_b, &bp_b, &permuted).unwrap();

        let la = tape_a.value(out_a.point_logits).data();
        let lb = tape_b.value(out_b.point_logits).data();
        for (j, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(lb[j * 3 + c], la[src * 3 + c], "point {j} channel {c}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig {
            widths: vec![8, 16],
            enc_depths: vec![1, 1],
            dec_depths: vec![1],
            n_state: 4,
            num_scans: 2,
            ..ModelConfig::toy()
        };
        let model = SegModel::new(cfg.clone()).unwrap();
        let params = noisy_params(&cfg, 20);
        let cloud = small_cloud(30, 2, 21);
        let run = || {
            let mut tape = Tape::new();
            let bp = bind_params(&mut tape, &params).unwrap();
            let out = model.forward(&mut tape, &bp, &cloud).unwrap();
            tape.value(out.point_logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_reach_the_earliest_parameters() {
        let cfg = ModelConfig {
            widths: vec![8, 16],
            enc_depths: vec![1, 1],
            dec_depths: vec![1],
            n_state: 4,
            num_scans: 2,
            ..ModelConfig::toy()
        };
        let model = SegModel::new(cfg.clone()).unwrap();
        let params = noisy_params(&cfg, 22);
        let cloud = small_cloud(30, 2, 23);
        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, &params).unwrap();
        let out = model.forward(&mut tape, &bp, &cloud).unwrap();
        let sq = tape.mul(out.voxel_logits, out.voxel_logits).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        tape.backward(loss).unwrap();
        for name in [
            "embed.spatial.k",
            "enc0.0.pos.dw.k",
            "enc0.0.mixer.ssm.a_log",
            "enc1.0.mixer.upper.k",
            "dec0.0.mlp.fc1.weight",
            "head.weight",
        ] {
            let g = tape.grad(bp.id(name)).unwrap_or_else(|| panic!("no grad for {name}"));
            let norm: f64 = g.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "gradient of {name} is identically zero");
        }
    }

    #[test]
    fn fd_whole_tiny_model() {
        // Single-stage model on a dozen points: every parameter's gradient
        // against central differences.
        let cfg = ModelConfig {
            widths: vec![4],
            enc_depths: vec![1],
            dec_depths: vec![],
            n_state: 2,
            expand: 2,
            num_scans: 2,
            ..ModelConfig::toy()
        };
        let model = SegModel::new(cfg.clone()).unwrap();
        let params = noisy_params(&cfg, 24);
        let cloud = small_cloud(12, 2, 25);
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let arrays: Vec<DenseArray> = params.iter().map(|(_, a)| a.clone()).collect();
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let rep = finite_diff_check(&arrays, &name_refs, 1e-5, |tape, ids| {
            let bp = BoundParams::from_ids(&names, ids);
            let out = model.forward(tape, &bp, &cloud)?;
            let sq = tape.mul(out.voxel_logits, out.voxel_logits)?;
            tape.mean_all(sq)
        })
        .unwrap();
        assert!(
            rep.max_rel_err < 1e-3,
            "rel err {:.3e} at {}",
            rep.max_rel_err,
            rep.worst
        );
    }

    #[test]
    fn checkpoint_round_trips_and_guards_the_digest() {
        let cfg = ModelConfig::toy();
        let params = Params::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, cfg.digest(), params.to_map()).unwrap();

        let loaded = load_checkpoint(&path, cfg.digest()).unwrap();
        assert_eq!(loaded.len(), params.len());
        for (name, arr) in params.iter() {
            assert_eq!(loaded[name].data(), arr.data(), "{name}");
            assert_eq!(loaded[name].shape(), arr.shape(), "{name}");
        }

        let err = load_checkpoint(&path, cfg.digest() ^ 1).unwrap_err();
        assert!(matches!(err, Error::ConfigDigestMismatch { .. }));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = ModelConfig::toy();
        let params = Params::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, cfg.digest(), params.to_map()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path, cfg.digest()).unwrap_err();
        assert!(matches!(err, Error::BadCheckpoint(_)));
    }

    #[test]
    fn params_init_is_deterministic() {
        let cfg = ModelConfig::toy();
        let a = Params::init(&cfg).unwrap();
        let b = Params::init(&cfg).unwrap();
        for ((n1, x), (n2, y)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(x.data(), y.data());
        }
    }
}
