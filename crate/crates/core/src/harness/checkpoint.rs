//! Versioned binary checkpoint persistence.
//!
//! Little-endian, dimensioned records behind a magic/version header. The
//! file captures everything a resumed run needs — frozen bases, adapter
//! factors, direction pairs, optimizer moments, and the exact RNG states —
//! so resuming reproduces the uninterrupted run bit for bit. A hash of the
//! originating config is embedded and checked on load so a state file
//! cannot silently attach to a different experiment.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapter::{LoraAdapter, RegPair, RegVariant};
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::linalg::{Matrix, Rng, RngState};
use crate::model::{AdapterTarget, FrozenExtras, Site, TinyModel};
use crate::trainer::{AdamState, AdapterSlots, OptimizerState, TrainState};

const MAGIC: [u8; 4] = *b"CLAB";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn save_checkpoint(
    path: &Path,
    config: &ExperimentConfig,
    model: &TinyModel,
    state: &TrainState,
) -> Result<()> {
    let bytes = encode(config.hash()?, model, state)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    config: &ExperimentConfig,
) -> Result<(TinyModel, TrainState)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, config)
}

fn encode(config_hash: u64, model: &TinyModel, state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u8(CHECKPOINT_VERSION);
    w.u64(config_hash);

    w.u64(state.completed_epochs as u64);
    w.u64(state.epoch_losses.len() as u64);
    for &l in &state.epoch_losses {
        w.f64(l);
    }
    w.rng(&state.shuffle_rng.snapshot());
    w.rng(&state.dropout_rng.snapshot());

    w.u64(state.optimizer.step);
    w.u64(state.optimizer.slots.len() as u64);
    for (target, slots) in &state.optimizer.slots {
        w.u8(target_tag(*target));
        w.matrix(&slots.a.m);
        w.matrix(&slots.a.v);
        w.matrix(&slots.b.m);
        w.matrix(&slots.b.v);
    }

    w.u64(model.sites.len() as u64);
    for (target, site) in &model.sites {
        w.u8(target_tag(*target));
        match site {
            Site::Frozen(base) => {
                w.u8(0);
                w.matrix(base);
            }
            Site::Adapted(ad) => {
                w.u8(1);
                w.matrix(&ad.w);
                w.matrix(&ad.a);
                w.matrix(&ad.b);
                w.u64(ad.rank as u64);
                w.f64(ad.alpha);
                match &ad.reg {
                    None => w.u8(0),
                    Some(reg) => {
                        w.u8(1);
                        w.u8(variant_tag(reg.variant));
                        w.u64(reg.k as u64);
                        w.matrix(&reg.p_a);
                        w.matrix(&reg.p_b);
                    }
                }
            }
        }
    }

    match &model.extras {
        FrozenExtras::Mlp => w.u8(0),
        FrozenExtras::Transformer { embed, pos, lm_head } => {
            w.u8(1);
            w.matrix(embed);
            w.matrix(pos);
            w.matrix(lm_head);
        }
    }
    Ok(w.out)
}

fn decode(bytes: &[u8], config: &ExperimentConfig) -> Result<(TinyModel, TrainState)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::checkpoint("not a checkpoint file".to_string()));
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let stored_hash = r.u64()?;
    let expected = config.hash()?;
    if stored_hash != expected {
        return Err(Error::checkpoint(format!(
            "config hash mismatch: checkpoint {stored_hash:#018x} vs config {expected:#018x}"
        )));
    }

    let completed_epochs = r.u64()? as usize;
    let n_losses = r.u64()? as usize;
    let mut epoch_losses = Vec::with_capacity(n_losses);
    for _ in 0..n_losses {
        epoch_losses.push(r.f64()?);
    }
    let shuffle_rng = Rng::restore(&r.rng()?);
    let dropout_rng = Rng::restore(&r.rng()?);

    let step = r.u64()?;
    let n_slots = r.u64()? as usize;
    let mut slots = BTreeMap::new();
    for _ in 0..n_slots {
        let target = target_from_tag(r.u8()?)?;
        let a = AdamState { m: r.matrix()?, v: r.matrix()? };
        let b = AdamState { m: r.matrix()?, v: r.matrix()? };
        if slots.insert(target, AdapterSlots { a, b }).is_some() {
            return Err(Error::checkpoint(format!("duplicate optimizer slot {target}")));
        }
    }

    let n_sites = r.u64()? as usize;
    let mut sites = BTreeMap::new();
    for _ in 0..n_sites {
        let target = target_from_tag(r.u8()?)?;
        let site = match r.u8()? {
            0 => Site::Frozen(r.matrix()?),
            1 => {
                let w = r.matrix()?;
                let a = r.matrix()?;
                let b = r.matrix()?;
                let rank = r.u64()? as usize;
                let alpha = r.f64()?;
                let reg = match r.u8()? {
                    0 => None,
                    1 => {
                        let variant = variant_from_tag(r.u8()?)?;
                        let k = r.u64()? as usize;
                        Some(RegPair { variant, k, p_a: r.matrix()?, p_b: r.matrix()? })
                    }
                    t => return Err(Error::checkpoint(format!("bad direction-pair tag {t}"))),
                };
                Site::Adapted(LoraAdapter { w, a, b, rank, alpha, reg })
            }
            t => return Err(Error::checkpoint(format!("bad site tag {t}"))),
        };
        if sites.insert(target, site).is_some() {
            return Err(Error::checkpoint(format!("duplicate site {target}")));
        }
    }

    let extras = match r.u8()? {
        0 => FrozenExtras::Mlp,
        1 => FrozenExtras::Transformer {
            embed: r.matrix()?,
            pos: r.matrix()?,
            lm_head: r.matrix()?,
        },
        t => return Err(Error::checkpoint(format!("bad extras tag {t}"))),
    };
    if r.at != bytes.len() {
        return Err(Error::checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.at
        )));
    }

    // Structural agreement with the config (the hash already ties content;
    // this catches hand-edited files with the right hash header).
    for target in config.model.available_targets() {
        let adapted = config.model.adapter_targets.contains(&target);
        match sites.get(&target) {
            Some(Site::Adapted(_)) if adapted => {}
            Some(Site::Frozen(_)) if !adapted => {}
            _ => {
                return Err(Error::checkpoint(format!(
                    "site {target} does not match the configured adapter layout"
                )))
            }
        }
    }
    for (target, site) in &sites {
        if let Site::Adapted(_) = site {
            if !slots.contains_key(target) {
                return Err(Error::checkpoint(format!("missing optimizer slot for {target}")));
            }
        }
    }

    let model = TinyModel {
        config: config.model.clone(),
        sites,
        extras,
    };
    let state = TrainState {
        optimizer: OptimizerState { slots, step },
        shuffle_rng,
        dropout_rng,
        completed_epochs,
        epoch_losses,
    };
    Ok((model, state))
}

fn target_tag(t: AdapterTarget) -> u8 {
    AdapterTarget::ALL
        .iter()
        .position(|&x| x == t)
        .expect("every target is listed") as u8
}

fn target_from_tag(tag: u8) -> Result<AdapterTarget> {
    AdapterTarget::ALL
        .get(tag as usize)
        .copied()
        .ok_or_else(|| Error::checkpoint(format!("bad adapter-target tag {tag}")))
}

fn variant_tag(v: RegVariant) -> u8 {
    match v {
        RegVariant::Random => 0,
        RegVariant::SvdMajor => 1,
        RegVariant::SvdMinor => 2,
    }
}

fn variant_from_tag(tag: u8) -> Result<RegVariant> {
    Ok(match tag {
        0 => RegVariant::Random,
        1 => RegVariant::SvdMajor,
        2 => RegVariant::SvdMinor,
        t => return Err(Error::checkpoint(format!("bad direction-variant tag {t}"))),
    })
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn rng(&mut self, s: &RngState) {
        self.u64(s.seed);
        for &w in &s.state {
            self.u64(w);
        }
        match s.spare_normal {
            None => self.u8(0),
            Some(v) => {
                self.u8(1);
                self.f64(v);
            }
        }
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::checkpoint("truncated checkpoint".to_string()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn rng(&mut self) -> Result<RngState> {
        let seed = self.u64()?;
        let state = [self.u64()?, self.u64()?, self.u64()?, self.u64()?];
        let spare_normal = match self.u8()? {
            0 => None,
            1 => Some(self.f64()?),
            t => return Err(Error::checkpoint(format!("bad rng spare tag {t}"))),
        };
        Ok(RngState { seed, state, spare_normal })
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::checkpoint("matrix dimension overflow".to_string()))?;
        if count > 16 * 1024 * 1024 {
            return Err(Error::checkpoint(format!(
                "implausible matrix size {rows}x{cols}"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        Matrix::from_vec(rows, cols, data)
            .map_err(|e| Error::checkpoint(format!("bad matrix payload: {e}")))
    }
}
