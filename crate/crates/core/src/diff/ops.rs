//! Differentiable operations on [`Graph`] nodes.
//!
//! Shapes must match exactly except where an op says otherwise: `add`/`sub`
//! accept a single-element operand on either side, and `add_row` adds a
//! `[1 × c]` row to every row of an `[m × c]` matrix.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn sum_to_scalar(g: &Tensor) -> Tensor {
    Tensor::scalar(g.sum())
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| Tensor::gemm(g, false, p[1], true)),
                    needs[1].then(|| Tensor::gemm(p[0], true, g, false)),
                ]
            }),
        ))
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, sign: f64, op: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            av.zip_map(bv, |x, y| x + sign * y)
        } else if bv.len() == 1 {
            let s = sign * bv.item();
            av.map(|x| x + s)
        } else if av.len() == 1 {
            let s = av.item();
            bv.map(|y| s + sign * y)
        } else {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        };
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |g, p, _, _| {
                let ga = if p[0].len() == g.len() {
                    g.clone()
                } else {
                    sum_to_scalar(g).reshape(p[0].shape()).expect("scalar")
                };
                let gb = if p[1].len() == g.len() {
                    g.map(|v| sign * v)
                } else {
                    Tensor::scalar(sign * g.sum())
                        .reshape(p[1].shape())
                        .expect("scalar")
                };
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, 1.0, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, -1.0, "sub")
    }

    /// `a[m × c] + row[1 × c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if !av.is_matrix() || rv.len() != av.cols() {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let value = av.add_row(rv);
        Ok(self.custom(
            &[a, row],
            value,
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.sum_rows().reshape(p[1].shape()).expect("row")),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.custom(
            &[a],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| c * v))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.custom(
            &[a],
            value,
            Box::new(|g, p, _, _| {
                vec![Some(p[0].zip_map(g, |x, gv| if x > 0.0 { gv } else { 0.0 }))]
            }),
        )
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { alpha * x.exp_m1() });
        self.custom(
            &[a],
            value,
            Box::new(move |g, p, _, _| {
                vec![Some(p[0].zip_map(g, |x, gv| {
                    if x > 0.0 {
                        gv
                    } else {
                        gv * alpha * x.exp()
                    }
                }))]
            }),
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let value = Tensor::concat(self.value(a), self.value(b), axis)?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |g, p, _, needs| {
                let (ga, gb) = if axis == 1 {
                    g.split_cols(p[0].cols())
                } else {
                    let n = p[0].len();
                    (
                        Tensor::new(p[0].shape().to_vec(), g.data()[..n].to_vec()).expect("rows"),
                        Tensor::new(p[1].shape().to_vec(), g.data()[n..].to_vec()).expect("rows"),
                    )
                };
                vec![needs[0].then_some(ga), needs[1].then_some(gb)]
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            value,
            Box::new(|g, p, _, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.custom(
            &[a],
            value,
            Box::new(|g, p, _, _| {
                let n = p[0].len() as f64;
                vec![Some(Tensor::full(p[0].shape(), g.item() / n))]
            }),
        )
    }

    fn check_same(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len() as f64;
        let value = Tensor::scalar(
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n,
        );
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |g, p, _, needs| {
                let c = 2.0 * g.item() / n;
                let d = p[0].zip_map(p[1], |x, y| c * (x - y));
                let db = needs[1].then(|| d.map(|v| -v));
                vec![Some(d), db]
            }),
        ))
    }

    /// Mean absolute difference over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "l1")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len() as f64;
        let value = Tensor::scalar(
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n,
        );
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |g, p, _, needs| {
                let c = g.item() / n;
                let d = p[0].zip_map(p[1], |x, y| {
                    if x > y {
                        c
                    } else if x < y {
                        -c
                    } else {
                        0.0
                    }
                });
                let db = needs[1].then(|| d.map(|v| -v));
                vec![Some(d), db]
            }),
        ))
    }

    /// Cross-entropy of row-wise softmax(`logits`) against `target`
    /// distributions, averaged over rows.
    pub fn softmax_ce(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.check_same(logits, target, "softmax_ce")?;
        let (lv, tv) = (self.value(logits).as_matrix(), self.value(target).as_matrix());
        let m = lv.rows() as f64;
        let probs = lv.softmax_rows();
        let ce: f64 = probs
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| -t * p.ln())
            .sum::<f64>()
            / m;
        Ok(self.custom(
            &[logits, target],
            Tensor::scalar(ce),
            Box::new(move |g, p, _, needs| {
                let z = p[0].as_matrix();
                let t = p[1].as_matrix();
                let s = z.softmax_rows();
                let c = z.cols();
                let scale = g.item() / m;
                let mut dz = vec![0.0; z.len()];
                for i in 0..z.rows() {
                    let tsum: f64 = t.row(i).iter().sum();
                    for j in 0..c {
                        dz[i * c + j] = scale * (tsum * s.row(i)[j] - t.row(i)[j]);
                    }
                }
                let dz = Tensor::new(p[0].shape().to_vec(), dz).expect("same shape");
                let dt = needs[1].then(|| {
                    Tensor::new(
                        p[1].shape().to_vec(),
                        s.data().iter().map(|v| -scale * v.ln()).collect(),
                    )
                    .expect("same shape")
                });
                vec![Some(dz), dt]
            }),
        ))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(Error::dim("softmax_rows", av.shape(), &[]));
        }
        let value = av.softmax_rows();
        Ok(self.custom(
            &[a],
            value,
            Box::new(|g, _, s, _| {
                let c = s.cols();
                let mut d = s.clone();
                for (drow, grow) in d.data_mut().chunks_mut(c).zip(g.data().chunks(c)) {
                    let dot: f64 = drow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for (dv, gv) in drow.iter_mut().zip(grow) {
                        *dv *= gv - dot;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Column means of `[m × c]` as `[1 × c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(Error::dim("mean_rows", av.shape(), &[]));
        }
        let m = av.rows() as f64;
        let value = av.sum_rows().map(|v| v / m);
        Ok(self.custom(
            &[a],
            value,
            Box::new(move |g, p, _, _| {
                let row = g.map(|v| v / m);
                vec![Some(Tensor::zeros(p[0].shape()).add_row(&row))]
            }),
        ))
    }

    /// Population variance of each column of `[m × c]` as `[1 × c]`.
    pub fn var_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(Error::dim("var_rows", av.shape(), &[]));
        }
        let m = av.rows() as f64;
        let mu = av.sum_rows().map(|v| v / m);
        let centered = av.add_row(&mu.map(|v| -v));
        let value = centered.map(|v| v * v).sum_rows().map(|v| v / m);
        Ok(self.custom(
            &[a],
            value,
            Box::new(move |g, _, _, _| {
                let c = centered.cols();
                let mut d = centered.clone();
                for row in d.data_mut().chunks_mut(c) {
                    for (v, gv) in row.iter_mut().zip(g.data()) {
                        *v *= 2.0 * gv / m;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}
