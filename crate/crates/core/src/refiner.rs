//! Gated refinement of a unimodal posterior with gradients of the
//! all-modality evidence bound.
//!
//! One refinement step feeds the input data, the current posterior
//! statistics, and layer-normalized bound gradients through ELU feature maps,
//! proposes tanh-bounded candidate statistics, and blends them with the
//! current statistics through sigmoid gates. Iterating the step walks the
//! posterior toward the all-modality optimum while only ever conditioning
//! the network on one modality's raw input.
//!
//! The refinement core (gradient map, candidates, gates) is shared across
//! modalities; only the input feature map `ref.x.<modality>` is
//! per-modality, since input widths differ.
//!
//! Gradients fed to the cell are treated as constants: the training loss
//! differentiates through the unrolled chain of gated updates but not
//! through the production of the gradient inputs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, GaussNodes, LOG_STD_MAX, LOG_STD_MIN};
use crate::graph::{Graph, NodeId};
use crate::model::{encode, gb_encode, EncoderKind, ModelParams, ParamNodes};
use crate::objectives::{gb_elbo, refinement_loss, ElboBreakdown};
use crate::rng::standard_normal_tensor;
use crate::tensor::Tensor;

/// One point on a refinement trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub step: usize,
}

impl RefinementState {
    pub fn gaussian(&self) -> Result<DiagGaussian> {
        DiagGaussian::new(self.mean.clone(), self.log_std.clone())
    }
}

/// States 0..=T plus the single-sample bound evaluated at each state. The
/// bound at state t < T is the one whose gradients produced the step to
/// t + 1; the bound at state T uses one extra fresh-noise evaluation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<RefinementState>,
    pub evals: Vec<ElboBreakdown>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// CSV lines `modality,item,t,elbo,recon,kl` (no header).
    pub fn csv_rows(&self, modality: &str, item: usize) -> String {
        let mut out = String::new();
        for (t, ev) in self.evals.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                modality, item, t, ev.total, ev.reconstruction, ev.kl
            ));
        }
        out
    }
}

/// Knobs for the unrolled loss. `inner_shift` adds and subtracts a constant
/// inside the inner bound before its gradients are taken; the detachment
/// contract says parameter gradients must not notice.
#[derive(Debug, Clone, Copy, Default)]
pub struct RefineOptions {
    pub inner_shift: f64,
}

/// One gated update in-graph. `grad_mean` and `grad_log_std` are expected to
/// be constant leaves holding bound gradients at the current state.
pub fn gb_refine_step(
    g: &mut Graph,
    pn: &mut ParamNodes,
    params: &ModelParams,
    modality: usize,
    x: NodeId,
    state: GaussNodes,
    grad_mean: NodeId,
    grad_log_std: NodeId,
) -> Result<GaussNodes> {
    let name = &params.modalities[modality].name;
    let wx = pn.node(g, &format!("ref.x.{}.w", name))?;
    let bx = pn.node(g, &format!("ref.x.{}.b", name))?;
    let wg = pn.node(g, "ref.grad.w")?;
    let bg = pn.node(g, "ref.grad.b")?;
    let wmu = pn.node(g, "ref.mu.w")?;
    let bmu = pn.node(g, "ref.mu.b")?;
    let wls = pn.node(g, "ref.ls.w")?;
    let bls = pn.node(g, "ref.ls.b")?;
    let wgm = pn.node(g, "ref.gate_mu.w")?;
    let bgm = pn.node(g, "ref.gate_mu.b")?;
    let wgl = pn.node(g, "ref.gate_ls.w")?;
    let bgl = pn.node(g, "ref.gate_ls.b")?;

    let hx_lin = g.linear(x, wx, bx)?;
    let hx = g.elu(hx_lin);

    let ngm = g.layer_norm(grad_mean)?;
    let ngl = g.layer_norm(grad_log_std)?;
    let grad_in = g.concat(&[state.mean, state.log_std, ngm, ngl], 1)?;
    let hg_lin = g.linear(grad_in, wg, bg)?;
    let hg = g.elu(hg_lin);

    let h = g.concat(&[hx, hg], 1)?;

    let cand_mu_lin = g.linear(h, wmu, bmu)?;
    let cand_mu = g.tanh(cand_mu_lin);
    let cand_ls_lin = g.linear(h, wls, bls)?;
    let cand_ls = g.tanh(cand_ls_lin);

    let gate_mu_lin = g.linear(h, wgm, bgm)?;
    let gate_mu = g.sigmoid(gate_mu_lin);
    let gate_ls_lin = g.linear(h, wgl, bgl)?;
    let gate_ls = g.sigmoid(gate_ls_lin);

    let keep_mu = g.mul(gate_mu, state.mean)?;
    let ngate_mu = g.neg(gate_mu);
    let inv_gate_mu = g.add_scalar(ngate_mu, 1.0)?;
    let take_mu = g.mul(inv_gate_mu, cand_mu)?;
    let new_mu = g.add(keep_mu, take_mu)?;

    let keep_ls = g.mul(gate_ls, state.log_std)?;
    let ngate_ls = g.neg(gate_ls);
    let inv_gate_ls = g.add_scalar(ngate_ls, 1.0)?;
    let take_ls = g.mul(inv_gate_ls, cand_ls)?;
    let new_ls_raw = g.add(keep_ls, take_ls)?;
    let new_ls = g.clamp(new_ls_raw, LOG_STD_MIN, LOG_STD_MAX);

    Ok(GaussNodes {
        mean: new_mu,
        log_std: new_ls,
    })
}

/// Value-level gated update for one item. Gradient inputs must be finite.
pub fn refine_step(
    params: &ModelParams,
    modality: usize,
    x: &[f64],
    state: &RefinementState,
    grad_mean: &[f64],
    grad_log_std: &[f64],
) -> Result<RefinementState> {
    if !grad_mean.iter().chain(grad_log_std.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "bound gradients at refinement step {} (modality {})",
            state.step, params.modalities[modality].name
        )));
    }
    let d = params.arch.latent_dim;
    if state.mean.len() != d || grad_mean.len() != d || grad_log_std.len() != d {
        return Err(Error::shape("state and gradient dims must match the latent"));
    }
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let xn = g.constant(crate::model::one_row(x));
    let st = GaussNodes {
        mean: g.constant(crate::model::one_row(&state.mean)),
        log_std: g.constant(crate::model::one_row(&state.log_std)),
    };
    let gm = g.constant(crate::model::one_row(grad_mean));
    let gl = g.constant(crate::model::one_row(grad_log_std));
    let next = gb_refine_step(&mut g, &mut pn, params, modality, xn, st, gm, gl)?;
    let mean = g.eval(next.mean)?.data().to_vec();
    let log_std = g.eval(next.log_std)?.data().to_vec();
    Ok(RefinementState {
        mean,
        log_std,
        step: state.step + 1,
    })
}

/// Gradients of the batched all-modality single-sample bound with respect to
/// the posterior statistics, together with the per-row bound values.
/// Summing rows before backward gives every item its own gradient.
fn inner_pass(
    params: &ModelParams,
    xs: &[Tensor],
    mean: &Tensor,
    log_std: &Tensor,
    noise: &Tensor,
    shift: f64,
) -> Result<(Tensor, Tensor, Vec<ElboBreakdown>)> {
    let mut g = Graph::new();
    let mut pn = ParamNodes::frozen(params);
    let mu = g.var(mean.clone());
    let ls = g.var(log_std.clone());
    let xns: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let nn = g.constant(noise.clone());
    let all: Vec<usize> = (0..params.modalities.len()).collect();
    let nodes = gb_elbo(
        &mut g,
        &mut pn,
        params,
        GaussNodes { mean: mu, log_std: ls },
        &xns,
        &all,
        nn,
    )?;
    let mut root = g.sum(nodes.total);
    if shift != 0.0 {
        let shifted = g.add_scalar(root, shift)?;
        root = g.add_scalar(shifted, -shift)?;
    }
    let grads = g.backward(root)?;
    let gm = grads
        .get(mu)
        .ok_or_else(|| Error::invalid("no mean gradient"))?
        .clone();
    let gl = grads
        .get(ls)
        .ok_or_else(|| Error::invalid("no log-std gradient"))?
        .clone();
    if !gm.all_finite() || !gl.all_finite() {
        return Err(Error::NonFinite(
            "bound gradients in refinement inner pass".into(),
        ));
    }
    let rows = mean.shape()[0];
    let mut evals = Vec::with_capacity(rows);
    for r in 0..rows {
        let recon = g.eval(nodes.recon)?.data()[r];
        let kl = g.eval(nodes.kl)?.data()[r];
        let total = g.eval(nodes.total)?.data()[r];
        let mut per_modality = Vec::with_capacity(nodes.per_modality.len());
        for &(mi, id) in &nodes.per_modality {
            per_modality.push((mi, g.eval(id)?.data()[r]));
        }
        evals.push(ElboBreakdown {
            reconstruction: recon,
            kl,
            total,
            per_modality,
        });
    }
    Ok((gm, gl, evals))
}

fn validate_full_x(params: &ModelParams, xs: &[Vec<f64>]) -> Result<()> {
    if xs.len() != params.modalities.len() {
        return Err(Error::invalid(format!(
            "refinement needs all {} modalities, got {}",
            params.modalities.len(),
            xs.len()
        )));
    }
    for (m, x) in params.modalities.iter().zip(xs) {
        if x.len() != m.dim {
            return Err(Error::shape(format!(
                "modality {} expects dim {}, got {}",
                m.name,
                m.dim,
                x.len()
            )));
        }
    }
    Ok(())
}

/// Run `t_steps` gated updates from the amortized encoder of `modality`,
/// using all modalities to evaluate the bound. Returns the final posterior
/// and the full trajectory. With `t_steps = 0` the encoder output is
/// returned unchanged (one bound evaluation is still recorded).
pub fn refine(
    params: &ModelParams,
    modality: usize,
    xs: &[Vec<f64>],
    t_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DiagGaussian, Trajectory)> {
    validate_full_x(params, xs)?;
    let d = params.arch.latent_dim;
    let x_m = &xs[modality];
    let q0 = encode(params, EncoderKind::Amortized, modality, x_m)?;
    let mut state = RefinementState {
        mean: q0.mean().to_vec(),
        log_std: q0.log_std().to_vec(),
        step: 0,
    };
    let x_tensors: Vec<Tensor> = xs.iter().map(|x| crate::model::one_row(x)).collect();
    let mut states = vec![state.clone()];
    let mut evals = Vec::with_capacity(t_steps + 1);

    for _ in 0..t_steps {
        let noise = standard_normal_tensor(rng, &[1, d]);
        let mean_t = crate::model::one_row(&state.mean);
        let ls_t = crate::model::one_row(&state.log_std);
        let (gm, gl, mut bd) = inner_pass(params, &x_tensors, &mean_t, &ls_t, &noise, 0.0)?;
        evals.push(bd.remove(0));
        state = refine_step(params, modality, x_m, &state, gm.data(), gl.data())?;
        states.push(state.clone());
    }

    let final_noise = standard_normal_tensor(rng, &[1, d]);
    let q_t = state.gaussian()?;
    evals.push(refinement_loss(params, xs, &q_t, final_noise.data())?);

    Ok((q_t, Trajectory { states, evals }))
}

/// Batched refinement: run `t_steps` gated updates for every row of the
/// batch at once, conditioning on `modality` and evaluating the bound over
/// all modalities. Returns the `(mean, log_std)` statistics at every state
/// `0..=t_steps`, each of shape `(batch, latent)`.
pub fn refine_batch_trajectory(
    params: &ModelParams,
    modality: usize,
    xs: &[Tensor],
    t_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor, Tensor)>> {
    if xs.len() != params.modalities.len() {
        return Err(Error::invalid("refinement needs all modalities"));
    }
    let batch = xs[0].shape()[0];
    let d = params.arch.latent_dim;

    let (mut mean_t, mut ls_t) = {
        let mut g = Graph::new();
        let mut pn = ParamNodes::frozen(params);
        let xn = g.constant(xs[modality].clone());
        let q = gb_encode(
            &mut g,
            &mut pn,
            EncoderKind::Amortized,
            &params.modalities[modality],
            xn,
        )?;
        let mean = g.eval(q.mean)?.clone();
        let ls = g.eval(q.log_std)?.clone();
        (mean, ls)
    };

    let mut states = vec![(mean_t.clone(), ls_t.clone())];
    for _ in 0..t_steps {
        let noise = standard_normal_tensor(rng, &[batch, d]);
        let (gm, gl, _) = inner_pass(params, xs, &mean_t, &ls_t, &noise, 0.0)?;
        let mut g = Graph::new();
        let mut pn = ParamNodes::frozen(params);
        let xn = g.constant(xs[modality].clone());
        let st = GaussNodes {
            mean: g.constant(mean_t.clone()),
            log_std: g.constant(ls_t.clone()),
        };
        let gm_n = g.constant(gm);
        let gl_n = g.constant(gl);
        let next = gb_refine_step(&mut g, &mut pn, params, modality, xn, st, gm_n, gl_n)?;
        mean_t = g.eval(next.mean)?.clone();
        ls_t = g.eval(next.log_std)?.clone();
        states.push((mean_t.clone(), ls_t.clone()));
    }
    Ok(states)
}

/// Final-state posteriors of [`refine_batch_trajectory`], one per row.
pub fn refine_batch(
    params: &ModelParams,
    modality: usize,
    xs: &[Tensor],
    t_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DiagGaussian>> {
    let states = refine_batch_trajectory(params, modality, xs, t_steps, rng)?;
    let (mean, ls) = states.last().unwrap();
    (0..mean.shape()[0])
        .map(|r| DiagGaussian::new(mean.row(r).to_vec(), ls.row(r).to_vec()))
        .collect()
}

/// The unrolled training loss as a live graph: bind, evaluate, backward.
pub struct BuiltLoss<'p> {
    pub graph: Graph,
    pub pn: ParamNodes<'p>,
    pub loss: NodeId,
}

/// Unrolled refinement training loss over a batch: for each modality, run
/// `t_steps` gated updates and average the negated post-step bounds, then
/// average over modalities and the batch. Bound gradients enter the cell as
/// constants; everything else (encoders, decoder, refinement core) is
/// differentiated through the unrolled chain.
pub fn build_refinement_training_loss<'p>(
    params: &'p ModelParams,
    xs: &[Tensor],
    t_steps: usize,
    rng: &mut ChaCha8Rng,
    trainable: impl Fn(&str) -> bool + 'p,
    options: &RefineOptions,
) -> Result<BuiltLoss<'p>> {
    if t_steps == 0 {
        return Err(Error::invalid("refinement training needs at least one step"));
    }
    if xs.len() != params.modalities.len() {
        return Err(Error::invalid(format!(
            "refinement training needs all {} modalities",
            params.modalities.len()
        )));
    }
    let batch = xs[0].shape()[0];
    let d = params.arch.latent_dim;
    let m_count = params.modalities.len();

    let mut g = Graph::new();
    let mut pn = ParamNodes::new(params, trainable);
    let xns: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let all: Vec<usize> = (0..m_count).collect();

    let mut loss_rows: Option<NodeId> = None;
    for mi in 0..m_count {
        let mut state = gb_encode(
            &mut g,
            &mut pn,
            EncoderKind::Amortized,
            &params.modalities[mi],
            xns[mi],
        )?;
        let mut elbo_rows_sum: Option<NodeId> = None;
        for t in 0..=t_steps {
            let noise = standard_normal_tensor(rng, &[batch, d]);
            if t < t_steps {
                // Bound gradients at the current state, detached.
                let mean_v = g.eval(state.mean)?.clone();
                let ls_v = g.eval(state.log_std)?.clone();
                let (gm, gl, _) =
                    inner_pass(params, xs, &mean_v, &ls_v, &noise, options.inner_shift)?;

                if t >= 1 {
                    let nn = g.constant(noise.clone());
                    let nodes = gb_elbo(&mut g, &mut pn, params, state, &xns, &all, nn)?;
                    elbo_rows_sum = Some(match elbo_rows_sum {
                        Some(acc) => g.add(acc, nodes.total)?,
                        None => nodes.total,
                    });
                }

                let gm_n = g.constant(gm);
                let gl_n = g.constant(gl);
                state = gb_refine_step(&mut g, &mut pn, params, mi, xns[mi], state, gm_n, gl_n)?;
            } else {
                // Final state: one fresh-noise bound, no further update.
                let nn = g.constant(noise);
                let nodes = gb_elbo(&mut g, &mut pn, params, state, &xns, &all, nn)?;
                elbo_rows_sum = Some(match elbo_rows_sum {
                    Some(acc) => g.add(acc, nodes.total)?,
                    None => nodes.total,
                });
            }
        }
        let neg = g.neg(elbo_rows_sum.unwrap());
        let scaled = g.scale(neg, 1.0 / t_steps as f64)?;
        loss_rows = Some(match loss_rows {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    let averaged = g.scale(loss_rows.unwrap(), 1.0 / m_count as f64)?;
    let loss = g.mean(averaged);
    Ok(BuiltLoss { graph: g, pn, loss })
}

/// Training loss for a single item.
pub fn refinement_training_loss(
    params: &ModelParams,
    xs: &[Vec<f64>],
    t_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    validate_full_x(params, xs)?;
    let tensors: Vec<Tensor> = xs.iter().map(|x| crate::model::one_row(x)).collect();
    let mut built = build_refinement_training_loss(
        params,
        &tensors,
        t_steps,
        rng,
        |_| false,
        &RefineOptions::default(),
    )?;
    built.graph.eval(built.loss)?.item()
}
