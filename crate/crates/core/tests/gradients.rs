use qdz::nn::{cross_entropy, distillation_loss, squared_error, DistillationConfig, Network, Tensor};
use qdz::quantcore::{
    dequantize, quant_point_gradient, quantize_nonuniform, LevelScheme, QuantizationPoints, QuantizedVector,
};
use qdz::rng::{stream, Purpose};
use rand::Rng;

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `Σ c_i sin(w_i) + ½ w_i²` and its gradient.
fn smooth_loss(w: &[f64], c: &[f64]) -> (f64, Vec<f64>) {
    let loss = w.iter().zip(c).map(|(w, c)| c * w.sin() + 0.5 * w * w).sum();
    let grad = w.iter().zip(c).map(|(w, c)| c * w.cos() + w).collect();
    (loss, grad)
}

fn with_points(qv: &QuantizedVector, points: Vec<f64>) -> QuantizedVector {
    QuantizedVector { scheme: LevelScheme::NonUniform(QuantizationPoints::new(points).unwrap()), ..qv.clone() }
}

#[test]
fn point_gradient_matches_finite_differences() {
    let h = 1e-6;
    for seed in 0..100u64 {
        let mut r = stream(seed, Purpose::Other(1), 0);
        let n = r.gen_range(5..200);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let count = r.gen_range(2..9);
        let mut points: Vec<f64> = (0..count).map(|_| r.gen::<f64>()).collect();
        points.sort_by(f64::total_cmp);
        let bucket = r.gen_range(1..=n);
        let qv = quantize_nonuniform(&v, bucket, &QuantizationPoints::new(points.clone()).unwrap()).unwrap();

        let (_, grad_w) = smooth_loss(&dequantize(&qv).unwrap(), &c);
        let analytic = quant_point_gradient(&qv, &grad_w).unwrap();
        // Assignments stay fixed: only the point values move.
        let numeric: Vec<f64> = (0..count)
            .map(|j| {
                let mut up = points.clone();
                up[j] += h;
                let mut down = points.clone();
                down[j] -= h;
                let lp = smooth_loss(&dequantize(&with_points(&qv, up)).unwrap(), &c).0;
                let lm = smooth_loss(&dequantize(&with_points(&qv, down)).unwrap(), &c).0;
                (lp - lm) / (2.0 * h)
            })
            .collect();
        let err = rel_error(&analytic, &numeric);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        for (j, g) in analytic.iter().enumerate() {
            if !qv.indices.contains(&(j as u32)) {
                assert_eq!(*g, 0.0, "seed {seed}: unused point {j}");
            }
        }
    }
}

#[test]
fn duplicate_point_gets_zero_gradient() {
    let v = [0.0, 0.3, 0.5, 0.52, 0.9, 1.0];
    let points = QuantizationPoints::new(vec![0.0, 0.5, 0.5, 1.0]).unwrap();
    let qv = quantize_nonuniform(&v, 6, &points).unwrap();
    assert!(!qv.indices.contains(&2));
    let g = quant_point_gradient(&qv, &[1.0; 6]).unwrap();
    assert_eq!(g[2], 0.0);
    assert!(g[1] != 0.0);
}

fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn flatten(net: &Network) -> Vec<f64> {
    net.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

fn param_mut(net: &mut Network, mut i: usize) -> &mut f64 {
    for l in &mut net.layers {
        if i < l.weights.len() {
            return &mut l.weights[i];
        }
        i -= l.weights.len();
        if i < l.bias.len() {
            return &mut l.bias[i];
        }
        i -= l.bias.len();
    }
    panic!("parameter index out of range")
}

type Loss<'a> = Box<dyn Fn(&Tensor) -> (f64, Tensor) + 'a>;

#[test]
fn backprop_matches_finite_differences() {
    let h = 1e-6;
    for seed in 0..50u64 {
        let mut r = stream(seed, Purpose::Other(2), 0);
        let mut net = Network::new(&[2, 16, 2], seed).unwrap();
        for l in &mut net.layers {
            l.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
        }
        let batch = 8;
        let x = random_tensor(&mut r, batch, 2, 2.0);
        let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..2)).collect();
        let teacher = random_tensor(&mut r, batch, 2, 3.0);
        let target = random_tensor(&mut r, batch, 2, 1.0);
        let cfg = DistillationConfig::new(r.gen_range(1.0..8.0), r.gen_range(0.0..1.0)).unwrap();

        let losses: Vec<(&str, Loss)> = vec![
            ("cross-entropy", Box::new(|z: &Tensor| cross_entropy(z, &labels).unwrap())),
            ("distillation", Box::new(|z: &Tensor| distillation_loss(z, &teacher, &labels, &cfg).unwrap())),
            ("squared", Box::new(|z: &Tensor| squared_error(z, &target).unwrap())),
        ];
        for (name, loss) in &losses {
            let cache = net.forward_cached(&x).unwrap();
            let (_, dz) = loss(&cache.logits);
            let grads = net.backward(&cache, &dz).unwrap();
            let analytic: Vec<f64> =
                grads.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect();
            let numeric: Vec<f64> = (0..flatten(&net).len())
                .map(|i| {
                    let mut up = net.clone();
                    *param_mut(&mut up, i) += h;
                    let mut down = net.clone();
                    *param_mut(&mut down, i) -= h;
                    (loss(&up.forward(&x).unwrap()).0 - loss(&down.forward(&x).unwrap()).0) / (2.0 * h)
                })
                .collect();
            let err = rel_error(&analytic, &numeric);
            assert!(err <= 1e-5, "seed {seed}, {name}: relative error {err}");
        }
    }
}
