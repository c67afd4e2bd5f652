//! Checkpoint directories: a `key=value` manifest, the config, and one
//! little-endian `f32` file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{FixedAnchors, TrainConfig, TrainError, TrainState};
use crate::memory::MemoryBank;
use crate::numerics::{Matrix, Scalar};

pub const CHECKPOINT_FORMAT: u32 = 1;

pub fn checkpoint_dir_name(step: usize) -> String {
    format!("ckpt_{step:06}")
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CheckpointCorrupt(msg.into())
}

fn write_f32<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<(), TrainError> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32<T: Scalar>(path: &Path, rows: usize, cols: usize) -> Result<Matrix<T>, TrainError> {
    let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    if bytes.len() != rows * cols * 4 {
        return Err(corrupt(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            rows * cols * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect();
    Matrix::new(rows, cols, data).map_err(|e| corrupt(e.to_string()))
}

fn write_u32s(path: &Path, v: &[usize]) -> Result<(), TrainError> {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as u32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_u32s(path: &Path, len: usize) -> Result<Vec<usize>, TrainError> {
    let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    if bytes.len() != len * 4 {
        return Err(corrupt(format!("{}: wrong length", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

/// Writes `state` to `dir`, replacing any previous contents atomically.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, dir: &Path) -> Result<(), TrainError> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    for sub in ["student", "teacher", "adam_m", "adam_v"] {
        fs::create_dir_all(tmp.join(sub))?;
    }
    let names = state.student.names();
    for (i, name) in names.iter().enumerate() {
        let file = format!("{name}.f32");
        write_f32(
            &tmp.join("student").join(&file),
            &state.student.tensors()[i],
        )?;
        write_f32(
            &tmp.join("teacher").join(&file),
            &state.teacher.tensors()[i],
        )?;
    }
    for i in 0..state.optimizer.len() {
        let name = optimizer_slot_name(names, i);
        write_f32(
            &tmp.join("adam_m").join(format!("{name}.f32")),
            &state.optimizer.m[i],
        )?;
        write_f32(
            &tmp.join("adam_v").join(format!("{name}.f32")),
            &state.optimizer.v[i],
        )?;
    }
    write_f32(&tmp.join("bank_cls.f32"), state.bank_cls.storage())?;
    write_f32(&tmp.join("bank_patch.f32"), state.bank_patch.storage())?;
    if let Some(h) = &state.baseline {
        fs::create_dir_all(tmp.join("baseline"))?;
        let b = tmp.join("baseline");
        write_f32(&b.join("student_cls.f32"), &h.student_cls)?;
        write_f32(&b.join("student_patch.f32"), &h.student_patch)?;
        write_f32(&b.join("teacher_cls.f32"), &h.teacher_cls.theta)?;
        write_f32(&b.join("teacher_patch.f32"), &h.teacher_patch.theta)?;
        write_f32(
            &b.join("center_cls.f32"),
            &Matrix::row_vector(&h.teacher_cls.center),
        )?;
        write_f32(
            &b.join("center_patch.f32"),
            &Matrix::row_vector(&h.teacher_patch.center),
        )?;
    }
    if let Some(f) = &state.fixed_anchors {
        write_u32s(&tmp.join("anchors_cls.u32"), &f.cls)?;
        write_u32s(&tmp.join("anchors_patch.u32"), &f.patch)?;
    }
    fs::write(tmp.join("config.json"), state.config.to_json())?;
    let manifest = [
        ("format_version", CHECKPOINT_FORMAT.to_string()),
        ("config_hash", state.config.hash()),
        ("step", state.step.to_string()),
        // every random stream is derived from (seed, purpose, step)
        (
            "rng_state",
            format!("derived:seed={}:step={}", state.config.seed, state.step),
        ),
        ("adam_t", state.optimizer.t.to_string()),
        ("bank_cls_cursor", state.bank_cls.cursor().to_string()),
        ("bank_cls_filled", state.bank_cls.filled().to_string()),
        ("bank_patch_cursor", state.bank_patch.cursor().to_string()),
        ("bank_patch_filled", state.bank_patch.filled().to_string()),
        ("baseline", u8::from(state.baseline.is_some()).to_string()),
        (
            "fixed_anchors",
            u8::from(state.fixed_anchors.is_some()).to_string(),
        ),
    ];
    let text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(tmp.join("manifest.txt"), text)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

fn optimizer_slot_name(names: &[String], i: usize) -> String {
    match i.checked_sub(names.len()) {
        None => names[i].clone(),
        Some(0) => "proto.cls".into(),
        Some(_) => "proto.patch".into(),
    }
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>, TrainError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| corrupt(format!("manifest line `{l}`")))
        })
        .collect()
}

/// Restores a state written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<TrainState<T>, TrainError> {
    let manifest_text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| corrupt(format!("{}: {e}", dir.display())))?;
    let manifest = parse_manifest(&manifest_text)?;
    let get = |k: &str| {
        manifest
            .get(k)
            .ok_or_else(|| corrupt(format!("manifest lacks `{k}`")))
    };
    let num = |k: &str| -> Result<u64, TrainError> {
        get(k)?.parse().map_err(|_| corrupt(format!("bad `{k}`")))
    };
    if num("format_version")? != u64::from(CHECKPOINT_FORMAT) {
        return Err(corrupt(format!(
            "unsupported format_version {}",
            get("format_version")?
        )));
    }
    let config_text = fs::read_to_string(dir.join("config.json"))
        .map_err(|e| corrupt(format!("config.json: {e}")))?;
    let config: TrainConfig =
        serde_json::from_str(&config_text).map_err(|e| corrupt(format!("config.json: {e}")))?;
    if &config.hash() != get("config_hash")? {
        return Err(corrupt("config.json does not match the manifest hash"));
    }
    let mut state = TrainState::<T>::new(config).map_err(|e| corrupt(e.to_string()))?;
    state.step = num("step")? as usize;
    state.optimizer.t = num("adam_t")?;

    let names: Vec<String> = state.student.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let (r, c) = state.student.tensors()[i].shape();
        let file = format!("{name}.f32");
        state.student.tensors_mut()[i] = read_f32(&dir.join("student").join(&file), r, c)?;
        state.teacher.tensors_mut()[i] = read_f32(&dir.join("teacher").join(&file), r, c)?;
    }
    for i in 0..state.optimizer.len() {
        let name = optimizer_slot_name(&names, i);
        let (r, c) = state.optimizer.m[i].shape();
        state.optimizer.m[i] = read_f32(&dir.join("adam_m").join(format!("{name}.f32")), r, c)?;
        state.optimizer.v[i] = read_f32(&dir.join("adam_v").join(format!("{name}.f32")), r, c)?;
    }
    let bank =
        |file: &str, prefix: &str, old: &MemoryBank<T>| -> Result<MemoryBank<T>, TrainError> {
            let storage = read_f32(&dir.join(file), old.capacity(), old.dim())?;
            MemoryBank::from_parts(
                storage,
                num(&format!("{prefix}_cursor"))? as usize,
                num(&format!("{prefix}_filled"))? as usize,
            )
            .map_err(|e| corrupt(e.to_string()))
        };
    state.bank_cls = bank("bank_cls.f32", "bank_cls", &state.bank_cls)?;
    state.bank_patch = bank("bank_patch.f32", "bank_patch", &state.bank_patch)?;

    if (num("baseline")? == 1) != state.baseline.is_some() {
        return Err(corrupt("baseline flag disagrees with config mode"));
    }
    if let Some(h) = &mut state.baseline {
        let b = dir.join("baseline");
        let (kc, d) = h.student_cls.shape();
        let kp = h.student_patch.rows();
        h.student_cls = read_f32(&b.join("student_cls.f32"), kc, d)?;
        h.student_patch = read_f32(&b.join("student_patch.f32"), kp, d)?;
        h.teacher_cls.theta = read_f32(&b.join("teacher_cls.f32"), kc, d)?;
        h.teacher_patch.theta = read_f32(&b.join("teacher_patch.f32"), kp, d)?;
        h.teacher_cls.center = read_f32::<T>(&b.join("center_cls.f32"), 1, kc)?.into_data();
        h.teacher_patch.center = read_f32::<T>(&b.join("center_patch.f32"), 1, kp)?.into_data();
    }
    if (num("fixed_anchors")? == 1) != state.fixed_anchors.is_some() {
        return Err(corrupt("fixed_anchors flag disagrees with config"));
    }
    if state.fixed_anchors.is_some() {
        state.fixed_anchors = Some(FixedAnchors {
            cls: read_u32s(&dir.join("anchors_cls.u32"), state.config.num_anchors)?,
            patch: read_u32s(
                &dir.join("anchors_patch.u32"),
                state.config.num_patch_anchors,
            )?,
        });
    }
    if !state.student.all_finite() || !state.teacher.all_finite() {
        return Err(corrupt("non-finite parameters"));
    }
    Ok(state)
}
