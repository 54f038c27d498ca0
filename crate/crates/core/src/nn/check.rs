//! Finite-difference gradient verification.
//!
//! Central differences with step `h` against the analytic gradients from the
//! tape. The loss closure must be deterministic (dropout disabled).

use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name and flat index of the worst parameter entry.
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a small absolute floor so near-zero gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central finite differences for every
/// scalar entry of every parameter.
///
/// `loss` evaluates the objective at the given parameters; `analytic_grads`
/// returns gradients in the same order as `params`.
pub fn finite_diff_check(
    params: &[(String, Tensor)],
    mut loss: impl FnMut(&[(String, Tensor)]) -> f64,
    analytic_grads: &[Tensor],
    h: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic_grads.len());
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for ti in 0..work.len() {
        assert_eq!(
            work[ti].1.shape, analytic_grads[ti].shape,
            "gradient shape for {}",
            work[ti].0
        );
        for j in 0..work[ti].1.data.len() {
            let orig = work[ti].1.data[j];
            work[ti].1.data[j] = orig + h;
            let up = loss(&work);
            work[ti].1.data[j] = orig - h;
            let down = loss(&work);
            work[ti].1.data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic_grads[ti].data[j];
            let e = rel_err(ad, fd);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{}] ad={ad:.3e} fd={fd:.3e}", work[ti].0, j);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::rng::stream;

    #[test]
    fn quadratic_is_exact_to_h_squared() {
        // loss = sum(x^2): gradient 2x, exact for central differences.
        let params = vec![("x".to_string(), Tensor::from_vec(vec![0.3, -1.2, 2.0]))];
        let loss = |p: &[(String, Tensor)]| p[0].1.data.iter().map(|v| v * v).sum::<f64>();
        let grads = vec![Tensor::from_vec(
            params[0].1.data.iter().map(|v| 2.0 * v).collect(),
        )];
        let report = finite_diff_check(&params, loss, &grads, 1e-5);
        assert!(report.max_rel_err < 1e-9, "{}", report.worst);
    }

    #[test]
    fn two_layer_mlp_gradients_match() {
        let mut rng = stream(4, "fd", 0);
        let w1 = Tensor::uniform(&[3, 5], 0.5, &mut rng);
        let b1 = Tensor::uniform(&[5], 0.5, &mut rng);
        let w2 = Tensor::uniform(&[5, 2], 0.5, &mut rng);
        let b2 = Tensor::uniform(&[2], 0.5, &mut rng);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let target = Tensor::uniform(&[4, 2], 1.0, &mut rng);

        let build = |p: &[(String, Tensor)], g: &mut Graph| {
            let w1 = g.leaf(p[0].1.clone());
            let b1 = g.leaf(p[1].1.clone());
            let w2 = g.leaf(p[2].1.clone());
            let b2 = g.leaf(p[3].1.clone());
            let xin = g.leaf(x.clone());
            let h = g.matmul(xin, w1);
            let h = g.add_bias(h, b1);
            let h = g.relu(h);
            let y = g.matmul(h, w2);
            let y = g.add_bias(y, b2);
            let t = g.leaf(target.clone());
            let d = g.sub(y, t);
            let sq = g.mul(d, d);
            let loss = g.mean(sq);
            (loss, [w1, b1, w2, b2])
        };

        let params: Vec<(String, Tensor)> = vec![
            ("w1".into(), w1),
            ("b1".into(), b1),
            ("w2".into(), w2),
            ("b2".into(), b2),
        ];
        let mut g = Graph::new();
        let (loss, ids) = build(&params, &mut g);
        g.backward(loss).unwrap();
        let grads: Vec<Tensor> = ids.iter().map(|id| g.grad(*id)).collect();

        let report = finite_diff_check(
            &params,
            |p| {
                let mut g = Graph::new();
                let (loss, _) = build(p, &mut g);
                g.value(loss).item()
            },
            &grads,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "{}", report.worst);
    }
}
