//! Central finite differences for checking analytic gradients.

use super::{
    BatchNormParams, Graph, Mode, Ops, Padding, ParamId, ParamKind, ParamStore, Result, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step used by [`check_graph`].
pub const STEP: f64 = 1e-5;
/// Denominator floor in the relative error, so exact zeros compare sanely.
pub const FLOOR: f64 = 1e-6;

/// Numeric gradient of `f` at `at` with step `h` per coordinate.
pub fn numeric_grad(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = at.clone();
    (0..at.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Uniform(-1, 1) tensor.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Graph under test: inputs and parameter ids in, one output out.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var], &[ParamId]) -> Result<Var> + 'a;

/// Worst relative error of d(sum(r * y))/d(inputs, trainable params) against
/// central differences, for a random projection `r` drawn from `seed`.
pub fn check_graph(
    seed: u64,
    inputs: Vec<Tensor>,
    params: Vec<(ParamKind, Tensor)>,
    mode: Mode,
    build: &Build<'_>,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .into_iter()
        .enumerate()
        .map(|(i, (k, t))| store.add(format!("p{i}"), k, t))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);

    // dropout masks depend on the graph seed, so every evaluation reuses it
    let eval = |store: &mut ParamStore,
                inputs: &[Tensor],
                proj: Option<&Tensor>|
     -> Result<(f64, Tensor)> {
        let mut g = Graph::with_seed(store, mode, 7);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vars, &ids)?;
        let yv = g.value(y).clone();
        let f = proj
            .map(|p| p.data().iter().zip(yv.data()).map(|(a, b)| a * b).sum())
            .unwrap_or(0.0);
        Ok((f, yv))
    };
    let (_, y0) = eval(&mut store, &inputs, None)?;
    let proj = random_tensor(&mut rng, y0.shape());

    store.zero_grad();
    let (input_grads, param_grads) = {
        let mut g = Graph::with_seed(&mut store, mode, 7);
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = build(&mut g, &vars, &ids)?;
        let p = g.input(proj.clone());
        let prod = g.mul(y, p)?;
        let loss = g.sum(prod)?;
        let grads = g.backward(loss)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or_default())
            .collect();
        let pg: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| g.store().get(*id).grad.data().to_vec())
            .collect();
        (ig, pg)
    };

    let mut worst: f64 = 0.0;
    let mut failure = None;
    for (i, t) in inputs.iter().enumerate() {
        let num = numeric_grad(
            |probe| {
                let mut ins = inputs.clone();
                ins[i] = probe.clone();
                eval(&mut store, &ins, Some(&proj))
                    .map(|r| r.0)
                    .unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        f64::NAN
                    })
            },
            t,
            STEP,
        );
        worst = worst.max(max_rel_error(&input_grads[i], &num, FLOOR));
    }
    for (j, id) in ids.iter().enumerate() {
        if !store.get(*id).kind.trainable() {
            continue;
        }
        let at = store.value(*id).clone();
        let num = numeric_grad(
            |probe| {
                store.get_mut(*id).value = probe.clone();
                eval(&mut store, &inputs, Some(&proj))
                    .map(|r| r.0)
                    .unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        f64::NAN
                    })
            },
            &at,
            STEP,
        );
        store.get_mut(*id).value = at;
        worst = worst.max(max_rel_error(&param_grads[j], &num, FLOOR));
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

/// Batch-norm parameter tuple for ids laid out as gamma, beta, mean, var.
pub fn bn_params(ids: &[ParamId]) -> BatchNormParams {
    BatchNormParams {
        gamma: ids[0],
        beta: ids[1],
        running_mean: ids[2],
        running_var: ids[3],
        momentum: 0.99,
        eps: 1e-3,
    }
}

fn bn_store_params(rng: &mut ChaCha8Rng, c: usize) -> Vec<(ParamKind, Tensor)> {
    vec![
        (
            ParamKind::BnScale,
            Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)),
        ),
        (ParamKind::BnShift, random_tensor(rng, &[c])),
        (ParamKind::RunningMean, Tensor::zeros(&[c])),
        (ParamKind::RunningVar, Tensor::full(&[c], 1.0)),
    ]
}

/// Worst relative error of every differentiable layer at one seed.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, stride, pad) in [
        ("conv2d", 1, Padding::Same),
        ("conv2d_strided", 2, Padding::Same),
        ("conv2d_valid", 1, Padding::Valid),
    ] {
        let (x, w) = (
            random_tensor(rng, &[2, 5, 5, 2]),
            random_tensor(rng, &[3, 3, 2, 3]),
        );
        let err = check_graph(
            seed,
            vec![x],
            vec![(ParamKind::Weight, w)],
            Mode::Train,
            &move |g, v, p| {
                let w = g.param(p[0]);
                g.conv2d(v[0], w, stride, pad)
            },
        )?;
        out.push((name, err));
    }
    let (x, w) = (
        random_tensor(rng, &[2, 3, 4, 3]),
        random_tensor(rng, &[3, 3, 2, 3]),
    );
    let err = check_graph(
        seed,
        vec![x],
        vec![(ParamKind::Weight, w)],
        Mode::Train,
        &|g, v, p| {
            let w = g.param(p[0]);
            g.deconv2d(v[0], w, 2)
        },
    )?;
    out.push(("deconv2d", err));
    for (name, mode) in [
        ("batch_norm_train", Mode::Train),
        ("batch_norm_eval", Mode::Eval),
    ] {
        let x = random_tensor(rng, &[3, 2, 3, 4]);
        let params = bn_store_params(rng, 4);
        out.push((
            name,
            check_graph(seed, vec![x], params, mode, &|g, v, p| {
                g.batch_norm(v[0], &bn_params(p))
            })?,
        ));
    }
    let unary: [(&'static str, &Build<'_>); 6] = [
        ("relu", &|g, v, _| g.relu(v[0])),
        ("leaky_relu", &|g, v, _| g.leaky_relu(v[0], 0.2)),
        ("sigmoid", &|g, v, _| g.sigmoid(v[0])),
        ("softmax", &|g, v, _| g.softmax(v[0])),
        ("dropout", &|g, v, _| g.dropout(v[0], 0.5)),
        ("abs_affine_log", &|g, v, _| {
            let a = g.abs(v[0])?;
            let s = g.affine(a, 2.0, 0.1)?;
            g.log_clamped(s, 1e-12)
        }),
    ];
    for (name, build) in unary {
        out.push((
            name,
            check_graph(
                seed,
                vec![random_tensor(rng, &[4, 5])],
                vec![],
                Mode::Train,
                build,
            )?,
        ));
    }
    let (a, b) = (
        random_tensor(rng, &[1, 2, 2, 3]),
        random_tensor(rng, &[1, 2, 2, 2]),
    );
    out.push((
        "concat",
        check_graph(seed, vec![a, b], vec![], Mode::Train, &|g, v, _| {
            g.concat(v)
        })?,
    ));
    let x = random_tensor(rng, &[3, 6]);
    let params = vec![
        (ParamKind::Weight, random_tensor(rng, &[6, 4])),
        (ParamKind::Bias, random_tensor(rng, &[4])),
    ];
    let err = check_graph(seed, vec![x], params, Mode::Train, &|g, v, p| {
        let (w, b) = (g.param(p[0]), g.param(p[1]));
        let xw = g.matmul(v[0], w)?;
        g.add_bias(xw, b)
    })?;
    out.push(("fully_connected", err));
    let x = random_tensor(rng, &[2, 8, 8, 1]);
    out.push((
        "fft2_mag",
        check_graph(seed, vec![x], vec![], Mode::Train, &|g, v, _| {
            g.fft2_mag(v[0])
        })?,
    ));
    let x = random_tensor(rng, &[2, 4, 4, 3]);
    let err = check_graph(seed, vec![x], vec![], Mode::Train, &|g, v, _| {
        let s = g.space_to_batch(v[0], 2)?;
        let f = g.reshape(s, &[8, 12])?;
        let c = g.select_last(f, 5)?;
        let r = g.reshape(c, &[2, 4])?;
        g.mean_last_axis(r)
    })?;
    out.push(("tiling_and_reductions", err));
    Ok(out)
}
