//! Mining of historical restoration knowledge for compound tasks: project
//! the compound branch's features and its constituents' features into a
//! shared latent space, predict a per-sample low-rank channel-mixing matrix
//! with a small hypernetwork, and inject the mixed history back into the
//! compound branch as a residual.
//!
//! Bank parameter ids, owned by the compound task:
//!   skmm/{task}/proj_c_{w,b}   3x3 conv, C -> M (compound projection)
//!   skmm/{task}/proj_h_{w,b}   3x3 conv, K*C -> M (history projection)
//!   skmm/{task}/hyper_{w1,b1}  linear 2M -> 4M
//!   skmm/{task}/hyper_{w2,b2}  linear 4M -> 2*M*R
//!   skmm/{task}/resid_{w,b}    3x3 conv, M -> C, zero-initialized so the
//!                              residual starts as an exact no-op

use crate::autodiff::{Tape, TensorId};
use crate::backbone::ModelState;
use crate::degrade::TaskSpec;
use crate::error::{Error, Result};

/// Create the mining bank for a compound task. `C` is the final stage's base
/// width (the features the bank consumes sit right before the exit conv).
pub fn init_bank(model: &mut ModelState, task_id: &str, spec: &TaskSpec) -> Result<()> {
    if !spec.is_compound() {
        return Err(Error::Registry(format!(
            "task '{task_id}' is single-degradation; no mining bank applies"
        )));
    }
    let c = model.config.stages[model.config.num_stages() - 1].width;
    let k = spec.constituents().len();
    let m = model.config.mining_channels;
    let r = model.config.mining_rank;
    let h = 4 * m;
    let p = format!("skmm/{task_id}");
    model.init_he(&format!("{p}/proj_c_w"), &[m, c, 3, 3], 9 * c);
    model.init_zeros(&format!("{p}/proj_c_b"), &[m]);
    model.init_he(&format!("{p}/proj_h_w"), &[m, k * c, 3, 3], 9 * k * c);
    model.init_zeros(&format!("{p}/proj_h_b"), &[m]);
    model.init_he(&format!("{p}/hyper_w1"), &[h, 2 * m], 2 * m);
    model.init_zeros(&format!("{p}/hyper_b1"), &[h]);
    model.init_he(&format!("{p}/hyper_w2"), &[2 * m * r, h], h);
    model.init_zeros(&format!("{p}/hyper_b2"), &[2 * m * r]);
    model.init_zeros(&format!("{p}/resid_w"), &[c, m, 3, 3]);
    model.init_zeros(&format!("{p}/resid_b"), &[c]);
    Ok(())
}

/// Latent projections: compound features and concatenated history features,
/// each mapped to [B,M,H,W].
pub fn project_on_tape(
    model: &ModelState,
    tape: &mut Tape,
    task_id: &str,
    f_c: TensorId,
    history: &[TensorId],
) -> Result<(TensorId, TensorId)> {
    if history.is_empty() {
        return Err(Error::InvalidArg("mining needs at least one history branch".into()));
    }
    let p = format!("skmm/{task_id}");
    let proj_h_w = model.param(&format!("{p}/proj_h_w"))?;
    let expect_in = proj_h_w.value.shape()[1];
    let per = tape.value(history[0]).shape()[1];
    if per * history.len() != expect_in {
        return Err(Error::shape(
            "mining projection",
            format!(
                "bank expects {expect_in} history channels, got {} x {per}",
                history.len()
            ),
        ));
    }
    let pcw = model.tape_param(tape, &format!("{p}/proj_c_w"))?;
    let pcb = model.tape_param(tape, &format!("{p}/proj_c_b"))?;
    let f_c_hat = tape.conv2d(f_c, pcw, Some(pcb), 1, 1)?;
    let cat = if history.len() == 1 { history[0] } else { tape.channel_concat(history)? };
    let phw = model.tape_param(tape, &format!("{p}/proj_h_w"))?;
    let phb = model.tape_param(tape, &format!("{p}/proj_h_b"))?;
    let f_h = tape.conv2d(cat, phw, Some(phb), 1, 1)?;
    Ok((f_c_hat, f_h))
}

/// Hypernetwork: pooled latent descriptors -> factors U, V [B,M,R] and the
/// mixing matrix A = sigmoid(U·Vᵀ) [B,M,M], entries strictly inside (0,1).
pub fn mining_matrix_on_tape(
    model: &ModelState,
    tape: &mut Tape,
    task_id: &str,
    f_c_hat: TensorId,
    f_h: TensorId,
) -> Result<(TensorId, TensorId, TensorId)> {
    let m = model.config.mining_channels;
    let r = model.config.mining_rank;
    let p = format!("skmm/{task_id}");
    let gc = tape.global_avg_pool(f_c_hat)?;
    let gh = tape.global_avg_pool(f_h)?;
    let descriptor = tape.channel_concat(&[gc, gh])?;
    let w1 = model.tape_param(tape, &format!("{p}/hyper_w1"))?;
    let b1 = model.tape_param(tape, &format!("{p}/hyper_b1"))?;
    let w2 = model.tape_param(tape, &format!("{p}/hyper_w2"))?;
    let b2 = model.tape_param(tape, &format!("{p}/hyper_b2"))?;
    let hid = tape.linear(descriptor, w1, b1)?;
    let hid = tape.gelu(hid)?;
    let uv = tape.linear(hid, w2, b2)?;
    let u_flat = tape.channel_slice(uv, 0, m * r)?;
    let v_flat = tape.channel_slice(uv, m * r, m * r)?;
    let b = tape.value(uv).shape()[0];
    let u = tape.reshape(u_flat, &[b, m, r])?;
    let v = tape.reshape(v_flat, &[b, m, r])?;
    let logits = tape.bmm_nt(u, v)?;
    let a = tape.sigmoid(logits)?;
    Ok((u, v, a))
}

/// Mix the projected history by A and add it back through the zero-start
/// residual conv.
pub fn mix_and_inject_on_tape(
    model: &ModelState,
    tape: &mut Tape,
    task_id: &str,
    f_c: TensorId,
    f_h: TensorId,
    a: TensorId,
) -> Result<TensorId> {
    let p = format!("skmm/{task_id}");
    let mixed = tape.channel_mix(a, f_h)?;
    let rw = model.tape_param(tape, &format!("{p}/resid_w"))?;
    let rb = model.tape_param(tape, &format!("{p}/resid_b"))?;
    let resid = tape.conv2d(mixed, rw, Some(rb), 1, 1)?;
    tape.add(f_c, resid)
}

/// Full mining pass: project, predict the matrix, mix, inject.
pub fn apply_on_tape(
    model: &ModelState,
    tape: &mut Tape,
    task_id: &str,
    f_c: TensorId,
    history: &[TensorId],
) -> Result<TensorId> {
    let (f_c_hat, f_h) = project_on_tape(model, tape, task_id, f_c, history)?;
    let (_, _, a) = mining_matrix_on_tape(model, tape, task_id, f_c_hat, f_h)?;
    mix_and_inject_on_tape(model, tape, task_id, f_c, f_h, a)
}
