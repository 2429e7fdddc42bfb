//! Programmatic invariant suite behind the `selfcheck` CLI command.
//! Each check returns a pass/fail with a one-line detail.

use crate::freq::{self, CoarseMaps};
use crate::image8::Rgb8Image;
use crate::inn::{CouplingLayer, DenseBlock, InvConv1x1, Subnet};
use crate::jpeg::{self, JpegImage};
use crate::loss::{angle_norm_loss, LossBreakdown};
use crate::metrics::{apd, psnr, ssim};
use crate::model::{MragConfig, MragModel};
use crate::optim::{Adam, TrainConfig};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::graph::Graph;
use crate::tensor::param::ParamStore;
use crate::tensor::Tensor;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Per-precision tolerances: (coupling round trip, dct round trip).
fn tolerances<S: Scalar>() -> (f64, f64) {
    if S::BITS == 32 {
        (1e-4, 1e-5)
    } else {
        (1e-9, 1e-10)
    }
}

fn synth_cover(seed: u64, size: usize) -> JpegImage {
    let mut rng = DetRng::new(seed);
    let mut img = Rgb8Image::filled(size, size, [0, 0, 0]);
    let (cx, cy) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let v = |k: f64| (128.0 + 85.0 * ((d / 7.0 + k).sin())).clamp(0.0, 255.0) as u8;
            img.set_pixel(x, y, [v(0.0), v(2.0), v(4.0)]);
        }
    }
    jpeg::compress_rgb(&img, 75).unwrap()
}

fn tensor_checks<S: Scalar>(out: &mut Vec<CheckResult>) {
    out.push(check("tensor.concat_split_inverse", || {
        let mut rng = DetRng::new(1);
        let a = Tensor::<S>::randn(vec![3, 4, 4], 1.0, &mut rng);
        let b = Tensor::<S>::randn(vec![3, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let av = g.constant(&a);
        let bv = g.constant(&b);
        let c = g.concat(&[av, bv], 0).map_err(|e| e.to_string())?;
        let parts = g.split(c, &[3, 3], 0).map_err(|e| e.to_string())?;
        ensure(g.value(parts[0]).data() == a.data(), "first segment differs")?;
        ensure(g.value(parts[1]).data() == b.data(), "second segment differs")?;
        Ok("bitwise".into())
    }));
    out.push(check("tensor.softmax_rows_sum_to_one", || {
        let mut rng = DetRng::new(2);
        let x = Tensor::<S>::randn(vec![6, 9], 3.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let s = g.softmax(xv, 1).map_err(|e| e.to_string())?;
        let v = g.value(s);
        for r in 0..6 {
            let sum: f64 = v.data()[r * 9..(r + 1) * 9].iter().map(|x| x.into_f64()).sum();
            ensure((sum - 1.0).abs() <= 1e-6, format!("row {r} sums to {sum}"))?;
        }
        // stabilization survives huge inputs
        let big = Tensor::<S>::filled(vec![1, 2], S::from_f64(1000.0));
        let bv = g.constant(&big);
        let sb = g.softmax(bv, 1).map_err(|e| e.to_string())?;
        let vb = g.value(sb);
        ensure((vb.data()[0].into_f64() - 0.5).abs() < 1e-6, "overflow in softmax")?;
        Ok("rows normalized".into())
    }));
    out.push(check("tensor.layer_norm_centers_rows", || {
        let mut rng = DetRng::new(3);
        let x = Tensor::<S>::randn(vec![5, 16], 2.0, &mut rng);
        let gain = Tensor::<S>::filled(vec![16], S::one());
        let bias = Tensor::<S>::zeros(vec![16]);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let gv = g.constant(&gain);
        let bv = g.constant(&bias);
        let y = g.layer_norm(xv, gv, bv).map_err(|e| e.to_string())?;
        let v = g.value(y);
        for r in 0..5 {
            let row = &v.data()[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().map(|x| x.into_f64()).sum::<f64>() / 16.0;
            let var: f64 =
                row.iter().map(|x| (x.into_f64() - mean).powi(2)).sum::<f64>() / 16.0;
            ensure(mean.abs() <= 1e-6, format!("row {r} mean {mean}"))?;
            ensure((var - 1.0).abs() <= 1e-3, format!("row {r} var {var}"))?;
        }
        Ok("rows standardized".into())
    }));
    out.push(check("tensor.determinism", || {
        let run = || {
            let mut rng = DetRng::new(4);
            let mut ps = ParamStore::<S>::new();
            let block = DenseBlock::new(&mut ps, &mut rng, "d", 2, 2, false);
            let x = Tensor::<S>::randn(vec![2, 8, 8], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let y = block.apply(&mut g, &ps, xv).unwrap();
            let sum = g.sum_all(y).unwrap();
            g.scalar_value(sum).into_f64().to_bits()
        };
        ensure(run() == run(), "two seeded runs diverged")?;
        Ok("bit-identical reruns".into())
    }));
}

fn codec_checks(out: &mut Vec<CheckResult>) {
    out.push(check("jpeg.round_trip_exact", || {
        let img = synth_cover(10, 32);
        let bytes = jpeg::encode(&img).map_err(|e| e.to_string())?;
        let back = jpeg::parse(&bytes).map_err(|e| e.to_string())?;
        ensure(back.planes == img.planes, "coefficients changed")?;
        ensure(back.quant_tables == img.quant_tables, "tables changed")?;
        ensure(bytes.starts_with(&[0xFF, 0xD8]) && bytes.ends_with(&[0xFF, 0xD9]), "framing")?;
        Ok(format!("{} bytes", bytes.len()))
    }));
    out.push(check("jpeg.quality_table_formula", || {
        let (luma, _) = jpeg::quant_tables_for_quality(50).map_err(|e| e.to_string())?;
        ensure(luma.values() == &jpeg::ANNEX_K_LUMA, "qf=50 must be the base table")?;
        let (luma75, _) = jpeg::quant_tables_for_quality(75).map_err(|e| e.to_string())?;
        ensure(luma75.value(0) == 8, "qf=75 DC entry")?;
        ensure(jpeg::quant_tables_for_quality(0).is_err(), "qf=0 accepted")?;
        Ok("scaling verified".into())
    }));
    out.push(check("jpeg.rejects_unsupported", || {
        ensure(jpeg::parse(b"\xff\xd8\xff\xc2").is_err(), "progressive accepted")?;
        let img = synth_cover(11, 16);
        let bytes = jpeg::encode(&img).map_err(|e| e.to_string())?;
        ensure(jpeg::parse(&bytes[..bytes.len() - 4]).is_err(), "truncated accepted")?;
        Ok("rejection paths live".into())
    }));
}

fn freq_checks<S: Scalar>(out: &mut Vec<CheckResult>) {
    let (_, dct_tol) = tolerances::<S>();
    out.push(check("freq.zigzag_bijection", || {
        let z = freq::zigzag::zigzag_order();
        ensure(z.position(0) == (0, 0) && z.position(63) == (7, 7), "endpoints")?;
        let mut seen = [false; 64];
        for r in 0..64 {
            let (a, b) = z.position(r);
            seen[a * 8 + b] = true;
        }
        ensure(seen.iter().all(|&s| s), "not a bijection")?;
        Ok("bijection".into())
    }));
    out.push(check("freq.dct8_orthonormal", || {
        let mut rng = DetRng::new(12);
        let mut worst_rt = 0.0f64;
        let mut worst_energy = 0.0f64;
        for _ in 0..200 {
            let mut x = [[0.0; 8]; 8];
            let mut ex = 0.0;
            for row in x.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.normal();
                    ex += *v * *v;
                }
            }
            let y = freq::dct8::forward(&x);
            let ey: f64 = y.iter().flatten().map(|v| v * v).sum();
            worst_energy = worst_energy.max((ex - ey).abs() / ex.max(1e-12));
            let back = freq::dct8::inverse(&y);
            for u in 0..8 {
                for v in 0..8 {
                    worst_rt = worst_rt.max((back[u][v] - x[u][v]).abs());
                }
            }
        }
        ensure(worst_rt <= 1e-10, format!("round trip {worst_rt:.2e}"))?;
        ensure(worst_energy <= 1e-6, format!("energy drift {worst_energy:.2e}"))?;
        Ok(format!("round trip {worst_rt:.1e}"))
    }));
    out.push(check("freq.ffd_iffd_bitwise", || {
        let mut rng = DetRng::new(13);
        for _ in 0..20 {
            let t = Tensor::<S>::randn(vec![6, 16, 16], 1.0, &mut rng);
            let maps = CoarseMaps::new(t.clone()).map_err(|e| e.to_string())?;
            let back = freq::iffd(&freq::ffd(&maps));
            ensure(back.tensor().data() == t.data(), "permutation mismatch")?;
        }
        Ok("20 random maps".into())
    }));
    out.push(check("freq.cfd_inverses", || {
        let cover = synth_cover(14, 16);
        let mut rng = DetRng::new(15);
        let secret = Rgb8Image::new(
            16,
            16,
            (0..16 * 16 * 3).map(|_| (rng.next_u64() & 0xFF) as u8).collect(),
        )
        .unwrap();
        let maps = freq::cfd::<S>(&cover, &secret).map_err(|e| e.to_string())?;
        let data = maps.tensor().data();
        let cover_part =
            Tensor::<S>::new(vec![3, 16, 16], data[..3 * 256].to_vec()).unwrap();
        let secret_part =
            Tensor::<S>::new(vec![3, 16, 16], data[3 * 256..].to_vec()).unwrap();
        let cover_back =
            freq::inverse_cfd_cover(&cover_part, &cover).map_err(|e| e.to_string())?;
        ensure(cover_back.planes == cover.planes, "cover coefficients drifted")?;
        let secret_back = freq::inverse_cfd_secret(&secret_part).map_err(|e| e.to_string())?;
        let worst = secret
            .data()
            .iter()
            .zip(secret_back.data())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        ensure(worst <= 1, format!("secret off by {worst}"))?;
        Ok("cover exact, secret within 1".into())
    }));
    let _ = dct_tol;
}

fn inn_checks<S: Scalar>(out: &mut Vec<CheckResult>) {
    let (coup_tol, _) = tolerances::<S>();
    out.push(check("inn.zero_init_identity", || {
        let mut rng = DetRng::new(20);
        let mut ps = ParamStore::<S>::new();
        let c = CouplingLayer::new(
            6,
            Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "p", 3, 3, false)),
            Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "r", 3, 3, false)),
            Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "e", 3, 3, false)),
        );
        let x = Tensor::<S>::randn(vec![6, 8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = c.forward(&mut g, &ps, xv).map_err(|e| e.to_string())?;
        ensure(g.value(y).data() == x.data(), "fresh coupling is not identity")?;
        Ok("identity at init".into())
    }));
    out.push(check("inn.coupling_round_trip", || {
        let mut rng = DetRng::new(21);
        let mut worst = 0.0f64;
        for trial in 0..25 {
            let mut ps = ParamStore::<S>::new();
            let c = CouplingLayer::new(
                6,
                Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "p", 3, 3, false)),
                Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "r", 3, 3, false)),
                Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "e", 3, 3, false)),
            );
            for id in ps.ids().collect::<Vec<_>>() {
                let t = ps.value_mut(id);
                let shape = t.shape().to_vec();
                *t = Tensor::randn(shape, 0.1, &mut rng);
            }
            let x = Tensor::<S>::randn(vec![6, 8, 8], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let y = c.forward(&mut g, &ps, xv).map_err(|e| e.to_string())?;
            let back = c.inverse(&mut g, &ps, y).map_err(|e| e.to_string())?;
            worst = worst.max(g.value(back).max_abs_diff(&g.value(xv)));
            ensure(
                worst <= coup_tol,
                format!("trial {trial}: round trip {worst:.2e} > {coup_tol:.0e}"),
            )?;
        }
        Ok(format!("max {worst:.1e} over 25 trials"))
    }));
    out.push(check("inn.invconv_round_trip", || {
        let mut rng = DetRng::new(22);
        let mut ps = ParamStore::<S>::new();
        let m = InvConv1x1::new_random_orthogonal(&mut ps, &mut rng, "m", 12);
        let x = Tensor::<S>::randn(vec![12, 8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = m.forward(&mut g, &ps, xv).map_err(|e| e.to_string())?;
        let back = m.inverse(&mut g, &ps, y).map_err(|e| e.to_string())?;
        let err = g.value(back).max_abs_diff(&g.value(xv));
        ensure(err <= 1e-5f64.max(coup_tol), format!("round trip {err:.2e}"))?;
        Ok(format!("{err:.1e}"))
    }));
    out.push(check("inn.scale_clamp_bounded", || {
        let mut rng = DetRng::new(23);
        let mut ps = ParamStore::<S>::new();
        let c = CouplingLayer::new(
            2,
            Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "p", 1, 1, false)),
            Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "r", 1, 1, false)),
            Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "e", 1, 1, false)),
        );
        for id in ps.ids().collect::<Vec<_>>() {
            let t = ps.value_mut(id);
            let shape = t.shape().to_vec();
            *t = Tensor::randn(shape, 50.0, &mut rng); // extreme weights
        }
        let x = Tensor::<S>::randn(vec![2, 8, 8], 100.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let y = c.forward(&mut g, &ps, xv).map_err(|e| e.to_string())?;
        ensure(g.value(y).is_finite(), "overflow despite clamp")?;
        Ok("no overflow at extreme weights".into())
    }));
}

fn model_checks<S: Scalar>(out: &mut Vec<CheckResult>) {
    out.push(check("model.identity_at_init", || {
        let cover = synth_cover(30, 16);
        let secret = {
            let mut rng = DetRng::new(31);
            Rgb8Image::new(
                16,
                16,
                (0..16 * 16 * 3).map(|_| (rng.next_u64() & 0xFF) as u8).collect(),
            )
            .unwrap()
        };
        let model: MragModel<S> = MragModel::new(MragConfig::new(16, 16), 32).unwrap();
        let bundle = model.hide(&cover, &secret).map_err(|e| e.to_string())?;
        ensure(bundle.stego.planes == cover.planes, "stego differs from cover at init")?;
        Ok("stego == cover at init".into())
    }));
    out.push(check("model.container_round_trip", || {
        let mut model: MragModel<S> = MragModel::new(MragConfig::new(16, 16), 33).unwrap();
        let mut rng = DetRng::new(34);
        for id in model.params.ids().collect::<Vec<_>>() {
            let t = model.params.value_mut(id);
            let shape = t.shape().to_vec();
            *t = Tensor::randn(shape, 0.05, &mut rng);
        }
        let mut buf = Vec::new();
        model.save(&mut buf).map_err(|e| e.to_string())?;
        let mut fresh: MragModel<S> = MragModel::new(MragConfig::new(16, 16), 99).unwrap();
        fresh.load(&mut buf.as_slice()).map_err(|e| e.to_string())?;
        ensure(fresh.params.checksum() == model.params.checksum(), "values drifted")?;
        Ok(format!("{} bytes", buf.len()))
    }));
}

fn loss_checks(out: &mut Vec<CheckResult>) {
    out.push(check("loss.angle_norm_hand_values", || {
        let v = |d: &[f64]| Tensor::<f64>::new(vec![d.len()], d.to_vec()).unwrap();
        let (a, n, an) = angle_norm_loss(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        ensure((a, n, an) == (1.0, 0.0, -1.0), format!("identical: {a} {n} {an}"))?;
        let (a, n, an) = angle_norm_loss(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
        ensure((a, n, an) == (0.0, 1.0, 1.0), format!("orthogonal: {a} {n} {an}"))?;
        let (a, n, an) = angle_norm_loss(&v(&[1.0, 0.0]), &v(&[2.0, 0.0])).unwrap();
        ensure((a, n, an) == (1.0, 0.5, -0.5), format!("scaled: {a} {n} {an}"))?;
        Ok("three hand-derived cases".into())
    }));
    out.push(check("loss.breakdown_identities", || {
        let b = LossBreakdown::new(0.25, 0.125, 0.875, 0.0625);
        ensure(b.l_an == -b.l_a + b.l_n, "l_an identity")?;
        ensure(b.l_total == b.l_hi + b.l_re + b.l_an, "l_total identity")?;
        Ok("exact".into())
    }));
}

fn optim_metric_checks<S: Scalar>(out: &mut Vec<CheckResult>) {
    out.push(check("optim.zero_grad_no_op", || {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut store = ParamStore::<S>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![S::from_f64(1.5), S::from_f64(-2.0)]).unwrap());
        let before = store.value(id).data().to_vec();
        Adam::new(&cfg).step(&mut store).map_err(|e| e.to_string())?;
        ensure(store.value(id).data() == before.as_slice(), "moved without gradient")?;
        Ok("parameters unchanged".into())
    }));
    out.push(check("metrics.sanity", || {
        let img = {
            let mut i = Rgb8Image::filled(16, 16, [0, 0, 0]);
            for y in 0..16 {
                for x in 0..16 {
                    i.set_pixel(x, y, [(x * 16) as u8, (y * 16) as u8, 128]);
                }
            }
            i
        };
        ensure(psnr(&img, &img).unwrap() == 100.0, "psnr cap")?;
        ensure(ssim(&img, &img).unwrap() == 1.0, "ssim identity")?;
        ensure(apd(&img, &img).unwrap() == 0.0, "apd identity")?;
        Ok("maximal on identical images".into())
    }));
}

/// Runs every module's invariant suite at the given precision.
pub fn run_all<S: Scalar>() -> Vec<CheckResult> {
    let mut out = Vec::new();
    tensor_checks::<S>(&mut out);
    codec_checks(&mut out);
    freq_checks::<S>(&mut out);
    inn_checks::<S>(&mut out);
    model_checks::<S>(&mut out);
    loss_checks(&mut out);
    optim_metric_checks::<S>(&mut out);
    out
}
