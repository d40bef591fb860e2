//! Forward implementations of the op set, each recording its backward rule.
//!
//! Shape conventions are strict: elementwise ops require identical shapes and
//! broadcasting exists only where a dedicated op provides it (`add_row_bias`,
//! `scale_rows`). Errors name the op and both shapes.

use super::kernels::{for_each_lane, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::tape::Tape;
use super::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Box2;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(ax) => {
            let mut s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != ax)
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                s.push(1);
            }
            s
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

impl Tape {
    // ---- elementwise ----

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(&[a, b], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (g, a) in g.iter_mut().zip(adj) {
                    *g += a;
                }
            });
            sink.add(&bc, |g| {
                for (g, a) in g.iter_mut().zip(adj) {
                    *g += a;
                }
            });
        });
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(&[a, b], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (g, a) in g.iter_mut().zip(adj) {
                    *g += a;
                }
            });
            sink.add(&bc, |g| {
                for (g, a) in g.iter_mut().zip(adj) {
                    *g -= a;
                }
            });
        });
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(&[a, b], &out, move |adj, sink| {
            let (av, bv) = (ac.to_vec(), bc.to_vec());
            sink.add(&ac, |g| {
                for ((g, a), y) in g.iter_mut().zip(adj).zip(&bv) {
                    *g += a * y;
                }
            });
            sink.add(&bc, |g| {
                for ((g, a), x) in g.iter_mut().zip(adj).zip(&av) {
                    *g += a * x;
                }
            });
        });
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(a.shape(), data)?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (g, a) in g.iter_mut().zip(adj) {
                    *g += c * a;
                }
            });
        });
        Ok(out)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(a.shape(), data)?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            let av = ac.to_vec();
            sink.add(&ac, |g| {
                for ((g, a), x) in g.iter_mut().zip(adj).zip(&av) {
                    if *x > 0.0 {
                        *g += a;
                    }
                }
            });
        });
        Ok(out)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let out = Tensor::new(a.shape(), data)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(&[a], &out, move |adj, sink| {
            let y = oc.to_vec();
            sink.add(&ac, |g| {
                for ((g, a), y) in g.iter_mut().zip(adj).zip(&y) {
                    *g += a * y * (1.0 - y);
                }
            });
        });
        Ok(out)
    }

    /// Elementwise robust L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            })
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            let av = ac.to_vec();
            sink.add(&ac, |g| {
                for ((g, a), &x) in g.iter_mut().zip(adj).zip(&av) {
                    *g += a * if x.abs() < 1.0 { x } else { x.signum() };
                }
            });
        });
        Ok(out)
    }

    /// Stable elementwise binary cross-entropy on logits:
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`. Gradients flow into `z` only.
    pub fn bce_with_logits(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        same_shape("bce_with_logits", z, y)?;
        let data: Vec<f64> = z
            .data()
            .iter()
            .zip(y.data().iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::new(z.shape(), data)?;
        let (zc, yc) = (z.clone(), y.clone());
        self.record(&[z], &out, move |adj, sink| {
            let (zv, yv) = (zc.to_vec(), yc.to_vec());
            sink.add(&zc, |g| {
                for i in 0..g.len() {
                    g[i] += adj[i] * (stable_sigmoid(zv[i]) - yv[i]);
                }
            });
        });
        Ok(out)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(&a.data(), &b.data(), &mut data, m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(&[a, b], &out, move |adj, sink| {
            let (av, bv) = (ac.to_vec(), bc.to_vec());
            // dA = adj * B^T ; dB = A^T * adj
            sink.add(&ac, |g| matmul_bt_acc(adj, &bv, g, m, n, k));
            sink.add(&bc, |g| matmul_at_acc(&av, adj, g, m, k, n));
        });
        Ok(out)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let av = a.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av[i * c + j];
            }
        }
        drop(av);
        let out = Tensor::new(vec![c, r], data)?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += adj[j * r + i];
                    }
                }
            });
        });
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, a.to_vec())?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (g, a) in g.iter_mut().zip(adj) {
                    *g += a;
                }
            });
        });
        Ok(out)
    }

    /// out[r,c] = m[r,c] + bias[c]
    pub fn add_row_bias(&self, m: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (sm, sb) = (m.shape(), bias.shape());
        if sm.len() != 2 || sb.len() != 1 || sb[0] != sm[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sm,
                rhs: sb,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let bv = bias.to_vec();
        let data: Vec<f64> = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        let out = Tensor::new(vec![r, c], data)?;
        let (mc, bc) = (m.clone(), bias.clone());
        self.record(&[m, bias], &out, move |adj, sink| {
            sink.add(&mc, |g| {
                for (g, a) in g.iter_mut().zip(adj) {
                    *g += a;
                }
            });
            sink.add(&bc, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[j] += adj[i * c + j];
                    }
                }
            });
        });
        Ok(out)
    }

    /// out[r,c] = m[r,c] * s[r]
    pub fn scale_rows(&self, m: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (sm, ss) = (m.shape(), s.shape());
        if sm.len() != 2 || ss.len() != 1 || ss[0] != sm[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: sm,
                rhs: ss,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let sv = s.to_vec();
        let data: Vec<f64> = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * sv[i / c])
            .collect();
        let out = Tensor::new(vec![r, c], data)?;
        let (mc, sc) = (m.clone(), s.clone());
        self.record(&[m, s], &out, move |adj, sink| {
            let (mv, sv) = (mc.to_vec(), sc.to_vec());
            sink.add(&mc, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += adj[i * c + j] * sv[i];
                    }
                }
            });
            sink.add(&sc, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i] += adj[i * c + j] * mv[i * c + j];
                    }
                }
            });
        });
        Ok(out)
    }

    /// Rows scaled to unit Euclidean length, smoothed as x / sqrt(|x|^2 + eps^2).
    pub fn l2_normalize_rows(&self, m: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-8;
        let sm = m.shape();
        if sm.len() != 2 {
            return Err(Error::invalid(
                "l2_normalize_rows",
                format!("expected a matrix, got {sm:?}"),
            ));
        }
        let (r, c) = (sm[0], sm[1]);
        let mv = m.data();
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &mv[i * c..(i + 1) * c];
            norms[i] = (row.iter().map(|x| x * x).sum::<f64>() + EPS * EPS).sqrt();
        }
        let data: Vec<f64> = mv
            .iter()
            .enumerate()
            .map(|(i, &x)| x / norms[i / c])
            .collect();
        drop(mv);
        let out = Tensor::new(vec![r, c], data)?;
        let mc = m.clone();
        self.record(&[m], &out, move |adj, sink| {
            let mv = mc.to_vec();
            sink.add(&mc, |g| {
                for i in 0..r {
                    let nu = norms[i];
                    let row = &mv[i * c..(i + 1) * c];
                    let arow = &adj[i * c..(i + 1) * c];
                    let dot: f64 = arow.iter().zip(row).map(|(a, x)| a * x).sum();
                    for j in 0..c {
                        g[i * c + j] += arow[j] / nu - row[j] * dot / (nu * nu * nu);
                    }
                }
            });
        });
        Ok(out)
    }

    // ---- reductions ----

    pub fn reduce_sum(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce_linear(a, axis, false)
    }

    pub fn reduce_mean(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce_linear(a, axis, true)
    }

    fn reduce_linear(&self, a: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let shape = a.shape();
        if let Some(ax) = axis {
            check_axis("reduce", &shape, ax)?;
        }
        let out_shape = reduced_shape(&shape, axis);
        let av = a.data();
        let (data, scatter): (Vec<f64>, Vec<usize>) = match axis {
            None => {
                let s: f64 = av.iter().sum();
                (vec![s], vec![0; av.len()])
            }
            Some(ax) => {
                let out_len: usize = out_shape.iter().product();
                let mut data = vec![0.0; out_len];
                let mut scatter = vec![0usize; av.len()];
                let mut lane = 0usize;
                for_each_lane(&shape, ax, |base, stride, len| {
                    for i in 0..len {
                        data[lane] += av[base + i * stride];
                        scatter[base + i * stride] = lane;
                    }
                    lane += 1;
                });
                (data, scatter)
            }
        };
        let count = match axis {
            None => av.len(),
            Some(ax) => shape[ax],
        };
        drop(av);
        let factor = if mean { 1.0 / count as f64 } else { 1.0 };
        let data = if mean {
            data.iter().map(|x| x * factor).collect()
        } else {
            data
        };
        let out = Tensor::new(out_shape, data)?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (i, g) in g.iter_mut().enumerate() {
                    *g += adj[scatter[i]] * factor;
                }
            });
        });
        Ok(out)
    }

    /// Max along `axis` (or over all elements). Ties route the gradient to
    /// the first maximum in row-major order.
    pub fn reduce_max(&self, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        let shape = a.shape();
        if let Some(ax) = axis {
            check_axis("reduce_max", &shape, ax)?;
        }
        let out_shape = reduced_shape(&shape, axis);
        let av = a.data();
        let (data, argmax): (Vec<f64>, Vec<usize>) = match axis {
            None => {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0usize;
                for (i, &x) in av.iter().enumerate() {
                    if x > best {
                        best = x;
                        at = i;
                    }
                }
                (vec![best], vec![at])
            }
            Some(ax) => {
                let mut data = Vec::new();
                let mut argmax = Vec::new();
                for_each_lane(&shape, ax, |base, stride, len| {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = base;
                    for i in 0..len {
                        let x = av[base + i * stride];
                        if x > best {
                            best = x;
                            at = base + i * stride;
                        }
                    }
                    data.push(best);
                    argmax.push(at);
                });
                (data, argmax)
            }
        };
        drop(av);
        let out = Tensor::new(out_shape, data)?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (lane, &src) in argmax.iter().enumerate() {
                    g[src] += adj[lane];
                }
            });
        });
        Ok(out)
    }

    // ---- softmax family ----

    /// Numerically stable softmax along a named axis (max subtraction).
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = a.shape();
        check_axis("softmax", &shape, axis)?;
        let av = a.data();
        let mut data = vec![0.0; av.len()];
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(av[base + i * stride]);
            }
            let mut z = 0.0;
            for i in 0..len {
                let e = (av[base + i * stride] - mx).exp();
                data[base + i * stride] = e;
                z += e;
            }
            for i in 0..len {
                data[base + i * stride] /= z;
            }
        });
        drop(av);
        let out = Tensor::new(shape.clone(), data)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(&[a], &out, move |adj, sink| {
            let y = oc.to_vec();
            sink.add(&ac, |g| {
                for_each_lane(&shape, axis, |base, stride, len| {
                    let mut dot = 0.0;
                    for i in 0..len {
                        let k = base + i * stride;
                        dot += adj[k] * y[k];
                    }
                    for i in 0..len {
                        let k = base + i * stride;
                        g[k] += y[k] * (adj[k] - dot);
                    }
                });
            });
        });
        Ok(out)
    }

    /// log(softmax(a)) computed without forming the softmax.
    pub fn log_softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = a.shape();
        check_axis("log_softmax", &shape, axis)?;
        let av = a.data();
        let mut data = vec![0.0; av.len()];
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(av[base + i * stride]);
            }
            let mut z = 0.0;
            for i in 0..len {
                z += (av[base + i * stride] - mx).exp();
            }
            let lse = mx + z.ln();
            for i in 0..len {
                let k = base + i * stride;
                data[k] = av[k] - lse;
            }
        });
        drop(av);
        let out = Tensor::new(shape.clone(), data)?;
        let (ac, oc) = (a.clone(), out.clone());
        self.record(&[a], &out, move |adj, sink| {
            let logp = oc.to_vec();
            sink.add(&ac, |g| {
                for_each_lane(&shape, axis, |base, stride, len| {
                    let mut total = 0.0;
                    for i in 0..len {
                        total += adj[base + i * stride];
                    }
                    for i in 0..len {
                        let k = base + i * stride;
                        g[k] += adj[k] - logp[k].exp() * total;
                    }
                });
            });
        });
        Ok(out)
    }

    // ---- indexing / assembly ----

    /// Concatenation along axis 0; all parts must agree on trailing dims.
    pub fn concat(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no tensors given"));
        }
        let first = parts[0].shape();
        let trailing = &first[1..];
        let mut rows = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || &s[1..] != trailing {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let out = Tensor::new(shape, data)?;
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        self.record(parts, &out, move |adj, sink| {
            let mut offset = 0usize;
            for p in &owned {
                let n = p.numel();
                let piece = &adj[offset..offset + n];
                sink.add(p, |g| {
                    for (g, a) in g.iter_mut().zip(piece) {
                        *g += a;
                    }
                });
                offset += n;
            }
        });
        Ok(out)
    }

    /// Contiguous range `[start, end)` along one axis.
    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let shape = a.shape();
        check_axis("slice", &shape, axis)?;
        if start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} invalid for axis of length {}", shape[axis]),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let av = a.data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        let mut sources = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for i in start..end {
                let base = (o * len + i) * inner;
                data.extend_from_slice(&av[base..base + inner]);
                sources.extend(base..base + inner);
            }
        }
        drop(av);
        let out = Tensor::new(out_shape, data)?;
        let ac = a.clone();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (k, &src) in sources.iter().enumerate() {
                    g[src] += adj[k];
                }
            });
        });
        Ok(out)
    }

    /// Flat-index gather into a vector.
    pub fn gather(&self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let n = a.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for {n} elements"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather", "empty index list"));
        }
        let av = a.data();
        let data: Vec<f64> = indices.iter().map(|&i| av[i]).collect();
        drop(av);
        let out = Tensor::new(vec![indices.len()], data)?;
        let ac = a.clone();
        let idx = indices.to_vec();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (k, &i) in idx.iter().enumerate() {
                    g[i] += adj[k];
                }
            });
        });
        Ok(out)
    }

    /// Row gather from a matrix; rows may repeat.
    pub fn gather_rows(&self, a: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let shape = a.shape();
        if shape.len() != 2 {
            return Err(Error::invalid(
                "gather_rows",
                format!("expected a matrix, got {shape:?}"),
            ));
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "empty row list"));
        }
        let av = a.data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        drop(av);
        let out = Tensor::new(vec![rows.len(), c], data)?;
        let ac = a.clone();
        let rows = rows.to_vec();
        self.record(&[a], &out, move |adj, sink| {
            sink.add(&ac, |g| {
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        g[i * c + j] += adj[k * c + j];
                    }
                }
            });
        });
        Ok(out)
    }

    // ---- convolution / pooling ----

    /// 2-D convolution over a `C x H x W` input with an `O x C x KH x KW`
    /// kernel and optional per-output-channel bias.
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != vec![c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: b.shape(),
                });
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let xv = x.data();
        let wv = w.data();
        let bv: Option<Vec<f64>> = bias.map(|b| b.to_vec());
        let mut data = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            let base_o = o * oh * ow;
            if let Some(b) = &bv {
                data[base_o..base_o + oh * ow].fill(b[o]);
            }
            for c in 0..c_in {
                let xc = &xv[c * h * wd..(c + 1) * h * wd];
                let wc = &wv[(o * c_in + c) * kh * kw..(o * c_in + c + 1) * kh * kw];
                for oi in 0..oh {
                    for u in 0..kh {
                        let xi = (oi * stride + u) as isize - pad as isize;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        let xrow = &xc[xi as usize * wd..(xi as usize + 1) * wd];
                        let wrow = &wc[u * kw..(u + 1) * kw];
                        let orow = &mut data[base_o + oi * ow..base_o + (oi + 1) * ow];
                        for (oj, ov) in orow.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for (v, &wv) in wrow.iter().enumerate() {
                                let xj = (oj * stride + v) as isize - pad as isize;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                acc += xrow[xj as usize] * wv;
                            }
                            *ov += acc;
                        }
                    }
                }
            }
        }
        drop(xv);
        drop(wv);
        let out = Tensor::new(vec![c_out, oh, ow], data)?;

        let (xc2, wc2) = (x.clone(), w.clone());
        let bc2 = bias.cloned();
        let mut rec_inputs: Vec<&Tensor> = vec![x, w];
        if let Some(b) = bias {
            rec_inputs.push(b);
        }
        self.record(&rec_inputs, &out, move |adj, sink| {
            let xv = xc2.to_vec();
            let wv = wc2.to_vec();
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            let mut db = vec![0.0; c_out];
            for o in 0..c_out {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let g = adj[(o * oh + oi) * ow + oj];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        for c in 0..c_in {
                            for u in 0..kh {
                                let xi = (oi * stride + u) as isize - pad as isize;
                                if xi < 0 || xi >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let xj = (oj * stride + v) as isize - pad as isize;
                                    if xj < 0 || xj >= wd as isize {
                                        continue;
                                    }
                                    let xi_flat = (c * h + xi as usize) * wd + xj as usize;
                                    let wi_flat = ((o * c_in + c) * kh + u) * kw + v;
                                    dx[xi_flat] += g * wv[wi_flat];
                                    dw[wi_flat] += g * xv[xi_flat];
                                }
                            }
                        }
                    }
                }
            }
            sink.add(&xc2, |gr| {
                for (g, d) in gr.iter_mut().zip(&dx) {
                    *g += d;
                }
            });
            sink.add(&wc2, |gr| {
                for (g, d) in gr.iter_mut().zip(&dw) {
                    *g += d;
                }
            });
            if let Some(b) = &bc2 {
                sink.add(b, |gr| {
                    for (g, d) in gr.iter_mut().zip(&db) {
                        *g += d;
                    }
                });
            }
        });
        Ok(out)
    }

    /// Max pooling with square window `k` and the given stride, no padding.
    /// Ties route the gradient to the first maximum in row-major order.
    pub fn maxpool2d(&self, x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::invalid(
                "maxpool2d",
                format!("expected C x H x W, got {xs:?}"),
            ));
        }
        if k == 0 || stride == 0 || xs[1] < k || xs[2] < k {
            return Err(Error::invalid(
                "maxpool2d",
                format!("window {k} stride {stride} invalid for input {xs:?}"),
            ));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let oh = (h - k) / stride + 1;
        let ow = (wd - k) / stride + 1;
        let xv = x.data();
        let mut data = vec![0.0; c_in * oh * ow];
        let mut argmax = vec![0usize; c_in * oh * ow];
        for c in 0..c_in {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0usize;
                    for u in 0..k {
                        for v in 0..k {
                            let idx = (c * h + oi * stride + u) * wd + oj * stride + v;
                            if xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    let oidx = (c * oh + oi) * ow + oj;
                    data[oidx] = best;
                    argmax[oidx] = at;
                }
            }
        }
        drop(xv);
        let out = Tensor::new(vec![c_in, oh, ow], data)?;
        let xc = x.clone();
        self.record(&[x], &out, move |adj, sink| {
            sink.add(&xc, |g| {
                for (oidx, &src) in argmax.iter().enumerate() {
                    g[src] += adj[oidx];
                }
            });
        });
        Ok(out)
    }

    /// Max-pools a region of a `C x H x W` feature map onto a fixed
    /// `C x pool_h x pool_w` grid. The region is given in feature-map
    /// coordinates; sub-bin edges use floor/ceil quantization with a minimum
    /// of one cell per bin, and gradients route to argmax cells.
    pub fn roi_pool(
        &self,
        x: &Tensor,
        region: &Box2,
        pool_h: usize,
        pool_w: usize,
    ) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::invalid(
                "roi_pool",
                format!("expected C x H x W, got {xs:?}"),
            ));
        }
        if pool_h == 0 || pool_w == 0 {
            return Err(Error::invalid("roi_pool", "pool dims must be positive"));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let x1 = region.x_min.clamp(0.0, wd as f64);
        let x2 = region.x_max.clamp(0.0, wd as f64);
        let y1 = region.y_min.clamp(0.0, h as f64);
        let y2 = region.y_max.clamp(0.0, h as f64);
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::RegionOutsideMap(format!(
                "[{}, {}, {}, {}] on {}x{}",
                region.x_min, region.y_min, region.x_max, region.y_max, h, wd
            )));
        }

        let xv = x.data();
        let mut data = vec![0.0; c_in * pool_h * pool_w];
        let mut argmax = vec![0usize; c_in * pool_h * pool_w];
        for bi in 0..pool_h {
            let (sy, ey) = bin_range(y1, y2, pool_h, bi, h);
            for bj in 0..pool_w {
                let (sx, ex) = bin_range(x1, x2, pool_w, bj, wd);
                for c in 0..c_in {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0usize;
                    for yy in sy..ey {
                        for xx in sx..ex {
                            let idx = (c * h + yy) * wd + xx;
                            if xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    let oidx = (c * pool_h + bi) * pool_w + bj;
                    data[oidx] = best;
                    argmax[oidx] = at;
                }
            }
        }
        drop(xv);
        let out = Tensor::new(vec![c_in, pool_h, pool_w], data)?;
        let xc = x.clone();
        self.record(&[x], &out, move |adj, sink| {
            sink.add(&xc, |g| {
                for (oidx, &src) in argmax.iter().enumerate() {
                    g[src] += adj[oidx];
                }
            });
        });
        Ok(out)
    }
}

/// Cell range of one RoI sub-bin: floor for the start edge, ceil for the end
/// edge, clamped to the map and at least one cell wide.
fn bin_range(lo: f64, hi: f64, bins: usize, b: usize, limit: usize) -> (usize, usize) {
    let span = hi - lo;
    let raw_s = (lo + span * b as f64 / bins as f64).floor();
    let raw_e = (lo + span * (b + 1) as f64 / bins as f64).ceil();
    let mut s = raw_s.max(0.0) as usize;
    let mut e = (raw_e.max(0.0) as usize).min(limit);
    if s >= limit {
        s = limit - 1;
    }
    if e <= s {
        e = s + 1;
    }
    (s, e)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
