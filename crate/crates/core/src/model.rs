//! FCRN and C-FCRN density regressors with auxiliary low-resolution heads.
//!
//! Block layout (main path):
//!
//! | block | op                          | output res |
//! |-------|-----------------------------|------------|
//! | 1-3   | conv3x3, relu, maxpool2     | 1/2 .. 1/8 |
//! | 4     | conv3x3, relu               | 1/8 (tap 1)|
//! | 5-7   | [concat], up2, conv3x3, relu| 1/4 .. 1   |
//! | 8     | conv1x1, relu               | 1          |
//!
//! In the concatenated variant block 5 sees `cat(block4, block3)`, block 6
//! `cat(block5, block2)` and block 7 `cat(block6, block1)`: every shortcut joins
//! feature maps of equal resolution. Blocks 5 and 6 feed taps 2 and 3.
//! Each auxiliary head is conv3x3, relu, conv1x1, relu.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{orthogonal_init, Dims, ParamId, ParamTensor, Tape, Tensor4, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";

/// Kernel counts of the first seven conv layers; the last layer has one kernel.
pub const DEFAULT_WIDTHS: [usize; 7] = [32, 64, 128, 512, 128, 64, 32];
pub const DEFAULT_AUX_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Plain ladder, every block reads only its predecessor.
    Fcrn,
    /// Ladder with resolution-matched concatenation shortcuts.
    Cfcrn,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcrn" => Ok(Arch::Fcrn),
            "cfcrn" | "c-fcrn" => Ok(Arch::Cfcrn),
            other => Err(Error::Config(format!("unknown architecture '{other}' (fcrn|cfcrn)"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Fcrn => "fcrn",
            Arch::Cfcrn => "cfcrn",
        })
    }
}

/// Parameter partition. `Theta1` holds blocks 1-4, `Theta2` block 5,
/// `Theta3` block 6, `Theta4` blocks 7-8; `AuxK` is head K.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Theta1,
    Theta2,
    Theta3,
    Theta4,
    Aux1,
    Aux2,
    Aux3,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Theta1,
        ParamGroup::Theta2,
        ParamGroup::Theta3,
        ParamGroup::Theta4,
        ParamGroup::Aux1,
        ParamGroup::Aux2,
        ParamGroup::Aux3,
    ];

    pub fn is_aux(self) -> bool {
        matches!(self, ParamGroup::Aux1 | ParamGroup::Aux2 | ParamGroup::Aux3)
    }

    fn of_block(block: usize) -> ParamGroup {
        match block {
            1..=4 => ParamGroup::Theta1,
            5 => ParamGroup::Theta2,
            6 => ParamGroup::Theta3,
            _ => ParamGroup::Theta4,
        }
    }
}

/// Network shape: architecture, input channels, layer widths, and whether the
/// auxiliary heads exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub widths: [usize; 7],
    pub aux_width: usize,
    pub with_aux: bool,
}

impl ModelSpec {
    pub fn new(arch: Arch, with_aux: bool) -> Self {
        ModelSpec {
            arch,
            in_channels: 3,
            widths: DEFAULT_WIDTHS,
            aux_width: DEFAULT_AUX_WIDTH,
            with_aux,
        }
    }

    /// Divides every hidden width by `divisor` (at least one channel each).
    pub fn narrowed(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        self.widths.iter_mut().for_each(|w| *w = (*w / d).max(1));
        self.aux_width = (self.aux_width / d).max(1);
        self
    }

    /// Input channel count of blocks 1..=8.
    pub fn block_inputs(&self) -> [usize; 8] {
        let w = self.widths;
        let (b5, b6, b7) = match self.arch {
            Arch::Fcrn => (w[3], w[4], w[5]),
            Arch::Cfcrn => (w[3] + w[2], w[4] + w[1], w[5] + w[0]),
        };
        [self.in_channels, w[0], w[1], w[2], b5, b6, b7, w[6]]
    }

    /// Channels of the three taps feeding the auxiliary heads.
    pub fn tap_channels(&self) -> [usize; 3] {
        [self.widths[3], self.widths[4], self.widths[5]]
    }

    fn validate(&self) -> Result<()> {
        if self.with_aux && self.arch != Arch::Cfcrn {
            return Err(Error::Config("auxiliary heads require the cfcrn architecture".into()));
        }
        if self.in_channels == 0 || self.widths.contains(&0) || self.aux_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable tensors of one network, tagged by partition group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    spec: ModelSpec,
    params: Vec<ParamTensor>,
    groups: Vec<ParamGroup>,
    by_name: HashMap<String, ParamId>,
}

/// Conv weight and bias ids of one layer.
#[derive(Clone, Copy, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

impl ParamStore {
    fn empty(spec: ModelSpec) -> Self {
        ParamStore {
            spec,
            params: Vec::new(),
            groups: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, p: ParamTensor, group: ParamGroup) -> Result<ParamId> {
        if self.by_name.contains_key(&p.name) {
            return Err(Error::usage(format!("duplicate parameter '{}'", p.name)));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(p.name.clone(), id);
        self.params.push(p);
        self.groups.push(group);
        Ok(id)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn has_aux(&self) -> bool {
        self.spec.with_aux
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.groups[id.0] == group)
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(ParamTensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::clear_grad);
    }

    pub fn sq_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.sq_norm()).sum()
    }

    fn conv_ids(&self, prefix: &str) -> Result<ConvIds> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            self.id(&name)
                .ok_or_else(|| Error::usage(format!("missing parameter '{name}'")))
        };
        Ok(ConvIds {
            weight: get("weight")?,
            bias: get("bias")?,
        })
    }

    /// Replaces every parameter value (matched by name) from `entries`.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor4)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, value) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter '{name}' in checkpoint")))?;
            let p = &mut self.params[id.0];
            if p.dims() != value.dims() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has dims {} in checkpoint, {} in model",
                    value.dims(),
                    p.dims()
                )));
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            p.value.write_to(&mut w)?;
        }
        Ok(())
    }

    /// Reads a checkpoint and rebuilds the store; the architecture is
    /// recovered from parameter names and shapes.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
        let entries = read_checkpoint_entries(&mut r)?;
        let spec = infer_spec(&entries)?;
        let mut store = build_params(&spec, 0)?;
        store.load_values(entries)?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        ParamStore::read_checkpoint(BufReader::new(f))
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Raw `(name, tensor)` records of a `DCKP` stream.
pub fn read_checkpoint_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor4)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected \"DCKP\"".into()));
    }
    let count = read_u64(r)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = read_u64(r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("parameter name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        entries.push((name, Tensor4::read_from(&mut *r)?));
    }
    Ok(entries)
}

fn infer_spec(entries: &[(String, Tensor4)]) -> Result<ModelSpec> {
    let dims = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.dims())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))
    };
    let mut widths = [0usize; 7];
    for (i, w) in widths.iter_mut().enumerate() {
        *w = dims(&format!("block{}.weight", i + 1))?.batch;
    }
    let in_channels = dims("block1.weight")?.channels;
    let b5_in = dims("block5.weight")?.channels;
    let arch = if b5_in == widths[3] + widths[2] {
        Arch::Cfcrn
    } else {
        Arch::Fcrn
    };
    let with_aux = entries.iter().any(|(n, _)| n.starts_with("aux"));
    let aux_width = if with_aux {
        dims("aux1.conv1.weight")?.batch
    } else {
        DEFAULT_AUX_WIDTH
    };
    Ok(ModelSpec {
        arch,
        in_channels,
        widths,
        aux_width,
        with_aux,
    })
}

/// Orthogonal kernels, zero biases, zero momenta. Main-path tensors are drawn
/// before the auxiliary heads, so a store with and without heads built from
/// the same seed share their main-path values.
pub fn build_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::empty(*spec);
    let inputs = spec.block_inputs();
    let mut conv = |store: &mut ParamStore, prefix: String, c_out: usize, c_in: usize, k: usize, group: ParamGroup| -> Result<()> {
        let w = orthogonal_init(format!("{prefix}.weight"), Dims::new(c_out, c_in, k, k), &mut rng);
        store.insert(w, group)?;
        store.insert(ParamTensor::zeros(format!("{prefix}.bias"), Dims::new(1, c_out, 1, 1)), group)?;
        Ok(())
    };
    for block in 1..=8 {
        let (c_out, k) = if block == 8 { (1, 1) } else { (spec.widths[block - 1], 3) };
        conv(&mut store, format!("block{block}"), c_out, inputs[block - 1], k, ParamGroup::of_block(block))?;
    }
    if spec.with_aux {
        let groups = [ParamGroup::Aux1, ParamGroup::Aux2, ParamGroup::Aux3];
        for (k, (&c_in, group)) in spec.tap_channels().iter().zip(groups).enumerate() {
            conv(&mut store, format!("aux{}.conv1", k + 1), spec.aux_width, c_in, 3, group)?;
            conv(&mut store, format!("aux{}.conv2", k + 1), 1, spec.aux_width, 1, group)?;
        }
    }
    Ok(store)
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Density map at input resolution, one channel.
    pub density: Var,
    /// Auxiliary maps at 1/8, 1/4 and 1/2 resolution, when requested.
    pub aux: Option<[Var; 3]>,
    /// Outputs of blocks 4, 5 and 6.
    pub taps: [Var; 3],
    /// Every parameter bound into the tape, for penalties.
    pub bound: Vec<(ParamId, Var)>,
}

struct Binder<'a> {
    store: &'a ParamStore,
    bound: Vec<(ParamId, Var)>,
}

impl Binder<'_> {
    fn conv(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let ids = self.store.conv_ids(prefix)?;
        let w = tape.param(ids.weight, self.store.get(ids.weight));
        let b = tape.param(ids.bias, self.store.get(ids.bias));
        self.bound.push((ids.weight, w));
        self.bound.push((ids.bias, b));
        tape.conv2d_same(x, w, b)
    }

    fn conv_relu(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv(tape, prefix, x)?;
        Ok(tape.relu(y))
    }
}

/// Runs the network described by `store` on `x`. The auxiliary heads run only
/// when `with_aux` is set; they never alter the main-path values.
pub fn forward(tape: &mut Tape, store: &ParamStore, x: Var, with_aux: bool) -> Result<ForwardOutput> {
    let d = tape.dims(x);
    if !d.height.is_multiple_of(8) || !d.width.is_multiple_of(8) || d.height == 0 || d.width == 0 {
        return Err(Error::shape(format!(
            "input spatial dims must be positive multiples of 8, got {d}"
        )));
    }
    if d.channels != store.spec.in_channels {
        return Err(Error::shape(format!(
            "network expects {} input channels, got {d}",
            store.spec.in_channels
        )));
    }
    if with_aux && !store.has_aux() {
        return Err(Error::usage("auxiliary outputs requested from a model without heads"));
    }
    let concat = store.arch() == Arch::Cfcrn;
    let mut bind = Binder {
        store,
        bound: Vec::with_capacity(store.len()),
    };

    let mut down = Vec::with_capacity(3);
    let mut h = x;
    for block in 1..=3 {
        let y = bind.conv_relu(tape, &format!("block{block}"), h)?;
        h = tape.maxpool2(y)?;
        down.push(h);
    }
    let tap1 = bind.conv_relu(tape, "block4", h)?;
    h = tap1;
    let mut taps = vec![tap1];
    for (block, skip) in [(5, down[2]), (6, down[1]), (7, down[0])] {
        let input = if concat { tape.concat_channels(h, skip)? } else { h };
        let up = tape.upsample_bilinear2(input);
        h = bind.conv_relu(tape, &format!("block{block}"), up)?;
        if block < 7 {
            taps.push(h);
        }
    }
    let density = bind.conv_relu(tape, "block8", h)?;
    let taps = [taps[0], taps[1], taps[2]];

    let aux = if with_aux {
        let mut maps = [density; 3];
        for (k, &tap) in taps.iter().enumerate() {
            let hidden = bind.conv_relu(tape, &format!("aux{}.conv1", k + 1), tap)?;
            maps[k] = bind.conv_relu(tape, &format!("aux{}.conv2", k + 1), hidden)?;
        }
        Some(maps)
    } else {
        None
    };
    Ok(ForwardOutput {
        density,
        aux,
        taps,
        bound: bind.bound,
    })
}

/// Forward pass of a concatenated store.
pub fn cfcrn_forward(tape: &mut Tape, store: &ParamStore, x: Var, with_aux: bool) -> Result<ForwardOutput> {
    if store.arch() != Arch::Cfcrn {
        return Err(Error::usage("cfcrn_forward needs a cfcrn parameter store"));
    }
    forward(tape, store, x, with_aux)
}

/// Forward pass of a plain (shortcut-free, head-free) store.
pub fn fcrn_forward(tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    if store.arch() != Arch::Fcrn {
        return Err(Error::usage("fcrn_forward needs an fcrn parameter store"));
    }
    Ok(forward(tape, store, x, false)?.density)
}

/// Density map for `image` without recording gradients.
pub fn predict(store: &ParamStore, image: &Tensor4) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let out = forward(&mut tape, store, x, false)?;
    Ok(tape.value(out.density).clone())
}
