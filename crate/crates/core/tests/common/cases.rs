//! Every differentiable primitive and loss term, each checked against central
//! differences on instances no larger than 8^3.

use tumorreg::deformation::{compose_var, exp_svf_var, jacobian_det_var, random_smooth_velocity};
use tumorreg::engine::{clstm_step, ClstmParams, ClstmState};
use tumorreg::losses::{
    masked_similarity, rigidity, smoothness, total_loss, tumor_obliteration, tumor_preservation,
    PairVars, StepVars,
};
use tumorreg::tensor::concat_channels;
use tumorreg::{LossWeights, SmoothnessMode, Tape, Tensor, Var};

use super::{gradient_error, off_grid, project, record_steps, uniform};

const EPS: f32 = 1e-2;

/// Values whose magnitude stays in `0.2..1.5`, clear of the kinks of `abs`
/// and `leaky_relu`.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let m = uniform(shape, 0.2, 1.5, seed);
    let s = uniform(shape, -1.0, 1.0, seed + 1);
    m.zip_map(&s, |a, b| if b < 0.0 { -a } else { a })
}

fn smooth_field(extents: [usize; 3], max: f32, seed: u64) -> Tensor {
    random_smooth_velocity(extents, 1.5, max, seed).into_tensor()
}

/// Soft mask in `[0, 1]` with a blob in the middle.
fn soft_mask(extents: [usize; 3], seed: u64) -> Tensor {
    let [d, h, w] = extents;
    let noise = uniform(&[1, d, h, w], 0.0, 0.2, seed);
    let data = noise
        .data()
        .iter()
        .enumerate()
        .map(|(p, &n)| {
            let (i, j, k) = (p / (h * w), (p / w) % h, p % w);
            let r2 = [(i, d), (j, h), (k, w)]
                .iter()
                .map(|&(x, n)| (x as f32 - (n as f32 - 1.0) / 2.0).powi(2))
                .sum::<f32>();
            (1.0 / (1.0 + (r2 - 4.0).exp())).max(n)
        })
        .collect();
    Tensor::new([1, d, h, w], data).unwrap()
}

/// Worst error of each primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let v444 = [2usize, 4, 4, 4];
    let mut out = Vec::new();
    let mut check = |name: &'static str, e: f64| out.push((name, e));

    check(
        "conv3d stride 1",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].conv3d(x[1], 1, 1)?, 1),
            &[
                uniform(&[2, 6, 6, 6], -1.0, 1.0, 1),
                uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, 2),
            ],
            EPS,
        ),
    );
    check(
        "conv3d stride 2",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].conv3d(x[1], 2, 1)?, 3),
            &[
                uniform(&[2, 8, 8, 8], -1.0, 1.0, 3),
                uniform(&[2, 2, 3, 3, 3], -0.5, 0.5, 4),
            ],
            EPS,
        ),
    );
    let unary: [(&'static str, for<'a> fn(Var<'a>) -> Var<'a>); 9] = [
        ("sigmoid", |v| v.sigmoid()),
        ("tanh", |v| v.tanh()),
        ("leaky_relu", |v| v.leaky_relu(0.2)),
        ("square", |v| v.square()),
        ("abs", |v| v.abs()),
        ("scale", |v| v.scale(-1.7)),
        ("add_scalar", |v| v.add_scalar(0.3)),
        ("neg", |v| v.neg()),
        ("one_minus", |v| v.one_minus()),
    ];
    for (i, (name, op)) in unary.into_iter().enumerate() {
        check(
            name,
            gradient_error(
                move |t: &Tape, x: &[Var]| project(t, op(x[0]), 10 + i as u64),
                &[away_from_zero(&v444, 20 + i as u64)],
                EPS,
            ),
        );
    }
    let binary: [(
        &'static str,
        for<'a> fn(Var<'a>, Var<'a>) -> tumorreg::Result<Var<'a>>,
    ); 4] = [
        ("add", |a, b| a.add(b)),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
        ("div", |a, b| a.div(b)),
    ];
    for (i, (name, op)) in binary.into_iter().enumerate() {
        check(
            name,
            gradient_error(
                move |t: &Tape, x: &[Var]| project(t, op(x[0], x[1])?, 30 + i as u64),
                &[
                    uniform(&v444, -1.0, 1.0, 40 + i as u64),
                    uniform(&v444, 0.5, 1.5, 50 + i as u64),
                ],
                EPS,
            ),
        );
    }
    check(
        "sum",
        gradient_error(
            |_: &Tape, x: &[Var]| Ok(x[0].square().sum()),
            &[uniform(&v444, -1.0, 1.0, 60)],
            EPS,
        ),
    );
    check(
        "mean",
        gradient_error(
            |_: &Tape, x: &[Var]| Ok(x[0].square().mean()),
            &[uniform(&v444, -1.0, 1.0, 61)],
            EPS,
        ),
    );
    check(
        "upsample2x",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].upsample2x(None)?, 62),
            &[uniform(&[2, 3, 4, 4], -1.0, 1.0, 63)],
            EPS,
        ),
    );
    check(
        "upsample2x cropped",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].upsample2x(Some([5, 8, 7]))?, 64),
            &[uniform(&[2, 3, 4, 4], -1.0, 1.0, 65)],
            EPS,
        ),
    );
    check(
        "grid_sample",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].grid_sample(x[1])?, 66),
            &[
                uniform(&[2, 6, 6, 6], -1.0, 1.0, 67),
                off_grid(&[3, 6, 6, 6], -1, 1, 68),
            ],
            1e-3,
        ),
    );
    check(
        "spatial_gradient",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].spatial_gradient()?, 69),
            &[uniform(&[3, 5, 4, 6], -1.0, 1.0, 70)],
            EPS,
        ),
    );
    check(
        "det_identity_plus",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].det_identity_plus()?, 71),
            &[uniform(&[9, 3, 3, 3], -0.4, 0.4, 72)],
            EPS,
        ),
    );
    check(
        "concat_channels",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, concat_channels(t, &[x[0], x[1]])?, 73),
            &[
                uniform(&[1, 4, 4, 4], -1.0, 1.0, 74),
                uniform(&[2, 4, 4, 4], -1.0, 1.0, 75),
            ],
            EPS,
        ),
    );
    check(
        "slice_channels",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].slice_channels(1, 2)?.square(), 76),
            &[uniform(&[4, 3, 3, 3], -1.0, 1.0, 77)],
            EPS,
        ),
    );
    check(
        "crop_spatial",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].crop_spatial([3, 2, 4])?.square(), 78),
            &[uniform(&[2, 4, 4, 4], -1.0, 1.0, 79)],
            EPS,
        ),
    );
    check(
        "add_channel_bias",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, x[0].add_channel_bias(x[1])?.square(), 80),
            &[
                uniform(&[3, 3, 3, 3], -1.0, 1.0, 81),
                uniform(&[3], -1.0, 1.0, 82),
            ],
            EPS,
        ),
    );
    check(
        "exp_svf",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, exp_svf_var(x[0], 7)?, 83),
            &[smooth_field([8, 8, 8], 1.5, 84)],
            EPS,
        ),
    );
    check(
        "compose",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, compose_var(x[0], x[1])?, 85),
            &[
                smooth_field([6, 6, 6], 1.0, 86),
                off_grid(&[3, 6, 6, 6], -1, 1, 87),
            ],
            1e-3,
        ),
    );
    check(
        "jacobian_det",
        gradient_error(
            |t: &Tape, x: &[Var]| project(t, jacobian_det_var(x[0])?, 88),
            &[smooth_field([6, 5, 7], 1.0, 89)],
            EPS,
        ),
    );
    check(
        "clstm_step",
        gradient_error(
            |t: &Tape, x: &[Var]| {
                let p = ClstmParams {
                    w_x: x[3],
                    w_h: x[4],
                    bias: x[5],
                };
                let state = ClstmState {
                    h: Some(x[1]),
                    c: Some(x[2]),
                };
                let (h, c) = clstm_step(x[0], state, &p)?;
                project(t, concat_channels(t, &[h, c])?, 90)
            },
            &[
                uniform(&[2, 4, 4, 4], -1.0, 1.0, 91),
                uniform(&[2, 4, 4, 4], -1.0, 1.0, 92),
                uniform(&[2, 4, 4, 4], -1.0, 1.0, 93),
                uniform(&[8, 2, 3, 3, 3], -0.3, 0.3, 94),
                uniform(&[8, 2, 3, 3, 3], -0.3, 0.3, 95),
                uniform(&[8], -0.5, 0.5, 96),
            ],
            EPS,
        ),
    );
    out
}

const EXT: [usize; 3] = [8, 8, 8];

/// Smooth field with every component in `bias ± amp`. Trilinear sampling has
/// kinks on grid planes, where a central difference averages two one-sided
/// slopes; keeping displacements bounded away from integers avoids them.
fn offset_field(amp: f32, bias: f32, seed: u64) -> Tensor {
    let v = smooth_field(EXT, amp, seed);
    v.map(|x| x + bias)
}

fn pair_inputs() -> Vec<Tensor> {
    vec![
        uniform(&[1, 8, 8, 8], 0.0, 1.0, 100),
        soft_mask(EXT, 101),
        uniform(&[1, 8, 8, 8], 0.0, 1.0, 102),
        soft_mask(EXT, 103),
        offset_field(0.15, 0.5, 104),
        offset_field(0.05, 0.2, 105),
    ]
}

fn pair_of<'t>(x: &[Var<'t>]) -> PairVars<'t> {
    PairVars {
        moving: x[0],
        moving_mask: x[1],
        fixed: x[2],
        fixed_mask: x[3],
    }
}

/// Worst error of each loss term, differentiated with respect to the pair
/// images, masks and the velocity fields that drive the steps. The two fields
/// add up to displacements between 0.5 and 0.9 voxel.
pub fn loss_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let inputs = pair_inputs();
    type Term = for<'t> fn(&PairVars<'t>, &[StepVars<'t>]) -> tumorreg::Result<Var<'t>>;
    let terms: [(&'static str, Term); 8] = [
        ("masked_similarity", |p, s| {
            let img: Vec<_> = s.iter().map(|s| s.warped_moving).collect();
            let m: Vec<_> = s.iter().map(|s| s.warped_moving_mask).collect();
            masked_similarity(&img, &m, p.fixed, p.fixed_mask)
        }),
        ("masked_similarity inverse", |p, s| {
            let img: Vec<_> = s.iter().map(|s| s.warped_fixed).collect();
            let m: Vec<_> = s.iter().map(|s| s.warped_fixed_mask).collect();
            masked_similarity(&img, &m, p.moving, p.moving_mask)
        }),
        ("smoothness grid units", |_, s| {
            smoothness(
                &s.iter().map(|s| s.phi).collect::<Vec<_>>(),
                SmoothnessMode::GridUnits,
            )
        }),
        ("smoothness normalized", |_, s| {
            smoothness(
                &s.iter().map(|s| s.phi_hat).collect::<Vec<_>>(),
                SmoothnessMode::Normalized,
            )
        }),
        ("smoothness raw", |_, s| {
            smoothness(
                &s.iter().map(|s| s.phi).collect::<Vec<_>>(),
                SmoothnessMode::Raw,
            )
        }),
        ("tumor_preservation", |_, s| Ok(tumor_preservation(s)?.0)),
        ("tumor_obliteration", |_, s| Ok(tumor_obliteration(s)?.0)),
        ("total_loss", |p, s| {
            let w = LossWeights {
                lambda_smooth: 2.0,
                lambda_pre: 0.5,
                lambda_ob: 0.7,
            };
            Ok(total_loss(p, s, &w, SmoothnessMode::GridUnits)?.0)
        }),
    ];
    for (name, term) in terms {
        let e = gradient_error(
            move |_: &Tape, x: &[Var]| {
                let pair = pair_of(x);
                let steps = record_steps(&pair, &[x[4], x[5]])?;
                term(&pair, &steps)
            },
            &inputs,
            1e-3,
        );
        out.push((name, e));
    }
    out.push((
        "rigidity",
        gradient_error(
            |_: &Tape, x: &[Var]| Ok(rigidity(&[x[0]], &[x[1]])?.0),
            &[smooth_field(EXT, 1.0, 106), soft_mask(EXT, 107)],
            EPS,
        ),
    ));
    out
}
