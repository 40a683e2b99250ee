//! Finite-difference verification of every differentiable op and of the
//! composite functions built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::cryptor::{generate_password, CryptorPair, DEFAULT_TOKENS};
use crate::encoders::{EncoderId, EncoderModel};
use crate::error::Result;
use crate::image::Image;
use crate::losses::{build_losses, BatchInputs, LossWeights};
use crate::numgrad::{finite_diff_check, GradCheckConfig, GradReport, Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::shield::{mt_loss, AttackConfig, Distortion, Target};

/// Pixels probed per image-sized input.
const IMAGE_COORDS: usize = 48;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub points: usize,
    pub worst_rel_error: f64,
    pub worst_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let u = Uniform::new(lo, hi).expect("valid range");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).expect("consistent shape")
}

/// `Σ out ⊙ w` for a fixed random `w`, reducing any output to a scalar
/// without symmetric cancellations.
fn project(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut ChaCha8Rng) -> (Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)>;

fn case<F>(f: F) -> Builder
where
    F: Fn(&mut ChaCha8Rng) -> (Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>) + 'static,
{
    Box::new(f)
}

/// Wraps an op with output shape `out_shape` so it reduces to a scalar.
fn projected<F>(out_shape: &[usize], rng: &mut ChaCha8Rng, op: F) -> Box<dyn Fn(&mut Graph, Var) -> Result<Var>>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + 'static,
{
    let w = randn(out_shape, rng);
    Box::new(move |g, x| {
        let y = op(g, x)?;
        project(g, y, &w)
    })
}

fn op_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul_lhs", case(|r| {
            let b = randn(&[4, 3], r);
            let f = projected(&[2, 3], r, move |g, x| {
                let bv = g.constant(b.clone());
                g.matmul(x, bv)
            });
            (randn(&[2, 4], r), f)
        })),
        ("matmul_rhs", case(|r| {
            let a = randn(&[2, 4], r);
            let f = projected(&[2, 3], r, move |g, x| {
                let av = g.constant(a.clone());
                g.matmul(av, x)
            });
            (randn(&[4, 3], r), f)
        })),
        ("bmm_lhs", case(|r| {
            let b = randn(&[2, 4, 3], r);
            let f = projected(&[2, 3, 3], r, move |g, x| {
                let bv = g.constant(b.clone());
                g.bmm(x, bv)
            });
            (randn(&[2, 3, 4], r), f)
        })),
        ("bmm_rhs", case(|r| {
            let a = randn(&[2, 3, 4], r);
            let f = projected(&[2, 3, 3], r, move |g, x| {
                let av = g.constant(a.clone());
                g.bmm(av, x)
            });
            (randn(&[2, 4, 3], r), f)
        })),
        ("transpose", case(|r| {
            let f = projected(&[2, 4, 3], r, |g, x| g.transpose(x));
            (randn(&[2, 3, 4], r), f)
        })),
        ("add", case(|r| {
            let b = randn(&[3, 4], r);
            let f = projected(&[3, 4], r, move |g, x| {
                let bv = g.constant(b.clone());
                g.add(x, bv)
            });
            (randn(&[3, 4], r), f)
        })),
        ("mul", case(|r| {
            let b = randn(&[3, 4], r);
            let f = projected(&[3, 4], r, move |g, x| {
                let bv = g.constant(b.clone());
                g.mul(x, bv)
            });
            (randn(&[3, 4], r), f)
        })),
        ("add_row_bias", case(|r| {
            let a = randn(&[3, 4], r);
            let f = projected(&[3, 4], r, move |g, x| {
                let av = g.constant(a.clone());
                g.add_row_bias(av, x)
            });
            (randn(&[4], r), f)
        })),
        ("scale", case(|r| {
            let f = projected(&[5], r, |g, x| Ok(g.scale(x, -1.7)));
            (randn(&[5], r), f)
        })),
        ("add_scalar", case(|r| {
            let f = projected(&[5], r, |g, x| Ok(g.add_scalar(x, 0.3)));
            (randn(&[5], r), f)
        })),
        ("softmax", case(|r| {
            let f = projected(&[3, 5], r, |g, x| g.softmax(x));
            (randn(&[3, 5], r), f)
        })),
        ("gelu", case(|r| {
            let f = projected(&[6], r, |g, x| Ok(g.gelu(x)));
            (randn(&[6], r), f)
        })),
        ("layer_norm_input", case(|r| {
            let (gain, bias) = (randn(&[5], r), randn(&[5], r));
            let f = projected(&[3, 5], r, move |g, x| {
                let (gv, bv) = (g.constant(gain.clone()), g.constant(bias.clone()));
                g.layer_norm(x, gv, bv, LAYER_NORM_EPS)
            });
            (randn(&[3, 5], r), f)
        })),
        ("layer_norm_gain", case(|r| {
            let (input, bias) = (randn(&[3, 5], r), randn(&[5], r));
            let f = projected(&[3, 5], r, move |g, x| {
                let (iv, bv) = (g.constant(input.clone()), g.constant(bias.clone()));
                g.layer_norm(iv, x, bv, LAYER_NORM_EPS)
            });
            (randn(&[5], r), f)
        })),
        ("layer_norm_bias", case(|r| {
            let (input, gain) = (randn(&[3, 5], r), randn(&[5], r));
            let f = projected(&[3, 5], r, move |g, x| {
                let (iv, gv) = (g.constant(input.clone()), g.constant(gain.clone()));
                g.layer_norm(iv, gv, x, LAYER_NORM_EPS)
            });
            (randn(&[5], r), f)
        })),
        ("rms_norm", case(|r| {
            let f = projected(&[3, 5], r, |g, x| g.rms_norm(x, 1e-12));
            (randn(&[3, 5], r), f)
        })),
        ("conv2d_input", case(|r| {
            let k = randn(&[3, 3, 2, 4], r);
            let f = projected(&[3, 3, 4], r, move |g, x| {
                let kv = g.constant(k.clone());
                g.conv2d(x, kv, 2, 1)
            });
            (randn(&[6, 6, 2], r), f)
        })),
        ("conv2d_kernel", case(|r| {
            let img = randn(&[6, 6, 2], r);
            let f = projected(&[4, 4, 4], r, move |g, x| {
                let iv = g.constant(img.clone());
                g.conv2d(iv, x, 1, 0)
            });
            (randn(&[3, 3, 2, 4], r), f)
        })),
        ("pad_reflect", case(|r| {
            let f = projected(&[6, 7, 2], r, |g, x| g.pad_reflect(x, 1));
            (randn(&[4, 5, 2], r), f)
        })),
        ("mean_rows", case(|r| {
            let f = projected(&[4], r, |g, x| g.mean_rows(x));
            (randn(&[3, 4], r), f)
        })),
        ("clamp", case(|r| {
            let f = projected(&[8], r, |g, x| g.clamp(x, -0.5, 0.5));
            (randn(&[8], r), f)
        })),
        ("reshape", case(|r| {
            let f = projected(&[2, 6], r, |g, x| g.reshape(x, &[2, 6]));
            (randn(&[3, 4], r), f)
        })),
        ("sum", case(|r| {
            let f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>> = Box::new(|g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            });
            (randn(&[7], r), f)
        })),
        ("select_rows", case(|r| {
            let f = projected(&[4, 3], r, |g, x| g.select_rows(x, &[2, 0, 2, 3]));
            (randn(&[4, 3], r), f)
        })),
        ("concat_rows", case(|r| {
            let other = randn(&[2, 3], r);
            let f = projected(&[5, 3], r, move |g, x| {
                let o = g.constant(other.clone());
                g.concat_rows(&[o, x])
            });
            (randn(&[3, 3], r), f)
        })),
        ("cos_rows_raw", case(|r| {
            let b = randn(&[3, 6], r);
            let f = projected(&[3], r, move |g, x| {
                let bv = g.constant(b.clone());
                g.cos_rows(x, bv, false)
            });
            (randn(&[3, 6], r), f)
        })),
        ("cos_rows_clamped", case(|r| {
            let b = randn(&[3, 6], r);
            let f = projected(&[3], r, move |g, x| {
                let bv = g.constant(b.clone());
                g.cos_rows(x, bv, true)
            });
            (randn(&[3, 6], r), f)
        })),
        ("pairwise_cos_raw", case(|r| {
            let f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>> = Box::new(|g, x| g.pairwise_cos_sum(x, false));
            (randn(&[5, 4], r), f)
        })),
        ("pairwise_cos_clamped", case(|r| {
            let f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>> = Box::new(|g, x| g.pairwise_cos_sum(x, true));
            (randn(&[5, 4], r), f)
        })),
    ]
}

fn image_point(rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[64, 64, 3], 0.05, 0.95, rng)
}

fn composite_cases() -> Vec<(String, Builder, Option<usize>)> {
    let mut out: Vec<(String, Builder, Option<usize>)> = Vec::new();
    for id in EncoderId::ALL {
        let enc = EncoderModel::new(id, 7);
        out.push((
            format!("encoder_{id}"),
            case(move |r| {
                let shape = enc.output_shape();
                let enc = enc.clone();
                let f = projected(&shape, r, move |g, x| enc.forward(g, x));
                (image_point(r), f)
            }),
            Some(IMAGE_COORDS),
        ));
    }
    out.push((
        "cryptor_forward_input".into(),
        case(|r| {
            let pair = CryptorPair::new(EncoderId::FaceA, 64, DEFAULT_TOKENS, 5).expect("valid dims");
            let pw = randn(&[2, 64], r);
            let f = projected(&[2, 64], r, move |g, x| {
                let net = pair.enc.bind(g, false);
                let p = g.constant(pw.clone());
                net.forward(g, x, p)
            });
            (randn(&[2, 64], r), f)
        }),
        None,
    ));
    out.push((
        "cryptor_forward_password".into(),
        case(|r| {
            let pair = CryptorPair::new(EncoderId::FaceA, 64, DEFAULT_TOKENS, 5).expect("valid dims");
            let e = randn(&[2, 64], r);
            let f = projected(&[2, 64], r, move |g, x| {
                let net = pair.dec.bind(g, false);
                let ev = g.constant(e.clone());
                net.forward(g, ev, x)
            });
            (randn(&[2, 64], r), f)
        }),
        None,
    ));
    let terms = ["loss_enc", "loss_dec", "loss_wrg", "loss_div", "loss_div_s", "loss_total"];
    for (ti, term) in terms.iter().enumerate() {
        for (param, decryptor) in [("fc_w", false), ("ca_wv", true)] {
            out.push((
                format!("{term}_{}_{param}", if decryptor { "dec" } else { "enc" }),
                case(move |r| {
                    let d = 16;
                    let pair = CryptorPair::new(EncoderId::FaceA, d, DEFAULT_TOKENS, 9).expect("valid dims");
                    let inputs = BatchInputs {
                        originals: randn(&[3, d], r),
                        correct: randn(&[3, d], r),
                        wrong: vec![randn(&[3, d], r), randn(&[3, d], r)],
                        p_enc: randn(&[d], r).into_data(),
                        p_dec: randn(&[d], r).into_data(),
                    };
                    let net = if decryptor { &pair.dec } else { &pair.enc };
                    let point = net.params.get(param).expect("known parameter").clone();
                    let jitter = randn(point.shape(), r).map(|v| 0.05 * v);
                    let point = Tensor::new(
                        point.shape().to_vec(),
                        point.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect(),
                    )
                    .expect("same shape");
                    let f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>> = Box::new(move |g, x| {
                        let mut enc = pair.enc.bind(g, false);
                        let mut dec = pair.dec.bind(g, false);
                        if decryptor {
                            dec.replace(param, x)?;
                        } else {
                            enc.replace(param, x)?;
                        }
                        let v = build_losses(g, &enc, &dec, &inputs, &LossWeights::default())?;
                        Ok([v.l_enc, v.l_dec, v.l_wrg, v.l_div, v.l_div_s, v.total][ti])
                    });
                    (point, f)
                }),
                None,
            ));
        }
    }
    for (name, set) in [
        ("mt_loss_identity", vec![Distortion::Identity]),
        ("mt_loss_noise", vec![Distortion::GaussianNoise]),
        ("mt_loss_blur", vec![Distortion::GaussianBlur]),
    ] {
        out.push((
            name.into(),
            case(move |r| {
                let encoders = [EncoderModel::new(EncoderId::FaceA, 7), EncoderModel::new(EncoderId::ClipHidden, 7)];
                let pw = generate_password(3, 64).expect("positive dim");
                let face = CryptorPair::new(EncoderId::FaceA, 64, DEFAULT_TOKENS, 1).expect("valid dims");
                let target_img = image_point(r);
                let e = encoders[0].encode(&Image::new(target_img).expect("valid image")).expect("valid image");
                let targets = vec![
                    Target {
                        encoder_id: EncoderId::FaceA,
                        embedding: Tensor::vector(face.encrypt(e.as_tensor().data(), &pw).expect("matching dims")),
                    },
                    Target {
                        encoder_id: EncoderId::ClipHidden,
                        embedding: randn(&encoders[1].output_shape(), r),
                    },
                ];
                let cfg = AttackConfig {
                    distortions: set.clone(),
                    ..AttackConfig::face()
                };
                let seed: u64 = r.random();
                let f: Box<dyn Fn(&mut Graph, Var) -> Result<Var>> = Box::new(move |g, x| {
                    let refs: Vec<&EncoderModel> = encoders.iter().collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    mt_loss(g, x, &refs, &targets, &cfg, &mut rng)
                });
                (image_point(r), f)
            }),
            Some(IMAGE_COORDS),
        ));
    }
    out
}

/// Checks every op and composite at `points` random points each.
pub fn run_suite(points: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    let mut all: Vec<(String, Builder, Option<usize>)> = op_cases()
        .into_iter()
        .map(|(n, b)| (n.to_string(), b, None))
        .collect();
    all.extend(composite_cases());
    for (i, (name, build, coords)) in all.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + i as u64);
        let mut entry = SuiteEntry {
            name: name.clone(),
            points,
            worst_rel_error: 0.0,
            worst_abs_error: 0.0,
            passed: true,
        };
        for p in 0..points {
            let (point, f) = build(&mut rng);
            let cfg = GradCheckConfig {
                tolerance,
                max_coords: coords,
                seed: seed.wrapping_add(p as u64),
                ..GradCheckConfig::default()
            };
            let r: GradReport = finite_diff_check(&name, f, &point, &cfg)?;
            entry.worst_rel_error = entry.worst_rel_error.max(r.max_rel_error);
            entry.worst_abs_error = entry.worst_abs_error.max(r.max_abs_error);
            entry.passed &= r.passed;
        }
        entries.push(entry);
    }
    Ok(SuiteReport { entries })
}
