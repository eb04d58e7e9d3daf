//! Detection loss on raw head maps.
//!
//! The loss is evaluated outside the autodiff graph in f64: it is cheap
//! compared with the network, and its gradient with respect to every head
//! logit is returned so the caller can seed `Graph::backward_with`.
//!
//! ```text
//! L = l_box * mean_pos(1 - CIoU)
//!   + l_obj * sum_s balance[s] * mean_cells BCE(obj_s, target_s)
//!   + l_cls * mean_pos mean_c BCE(cls, onehot)
//! ```
//!
//! Boxes decode as `x = (2 sig(tx) - 0.5 + gx) * stride`,
//! `w = (2 sig(tw))^2 * anchor_w`.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use super::targets::Targets;
use crate::error::{Error, Result};
use crate::model::HeadGeometry;
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Objectness weight per scale, finest first.
    pub obj_balance: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_weight: 0.05,
            obj_weight: 1.0,
            cls_weight: 0.5,
            obj_balance: vec![4.0, 1.0, 0.4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, scales: usize) -> Result<()> {
        let all = [self.box_weight, self.obj_weight, self.cls_weight];
        if all.iter().chain(&self.obj_balance).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.obj_balance.len() != scales {
            return Err(Error::Config(format!(
                "obj_balance has {} entries for {scales} scales",
                self.obj_balance.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub total: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    /// d total / d map, one per scale.
    pub grads: Vec<Tensor<T>>,
}

/// Value plus gradient with respect to `(tx, ty, tw, th)`.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    pub fn sigmoid(self) -> Self {
        let s = sigmoid(self.v);
        self.chain(s, s * (1.0 - s))
    }

    pub fn atan(self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }

    pub fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    pub fn relu(self) -> Self {
        self.max(Dual::constant(0.0))
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: std::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v)),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, k: f64) -> Dual {
        Dual {
            v: self.v * k,
            d: self.d.map(|x| x * k),
        }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, k: f64) -> Dual {
        Dual { v: self.v + k, d: self.d }
    }
}

/// Complete IoU of two `[cx, cy, w, h]` boxes.
pub fn ciou(a: [Dual; 4], b: [f64; 4]) -> Dual {
    let c = Dual::constant;
    let [ax, ay, aw, ah] = a;
    let (ax1, ax2, ay1, ay2) = (ax - aw * 0.5, ax + aw * 0.5, ay - ah * 0.5, ay + ah * 0.5);
    let (bx1, bx2, by1, by2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax2.min(c(bx2)) - ax1.max(c(bx1))).relu();
    let ih = (ay2.min(c(by2)) - ay1.max(c(by1))).relu();
    let inter = iw * ih;
    let union = aw * ah + (b[2] * b[3] + EPS) - inter;
    let iou = inter / union;
    let cw = ax2.max(c(bx2)) - ax1.min(c(bx1));
    let ch = ay2.max(c(by2)) - ay1.min(c(by1));
    let diag2 = cw.square() + ch.square() + EPS;
    let rho2 = (ax - c(b[0])).square() + (ay - c(b[1])).square();
    let k = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let v = (c((b[2] / b[3]).atan()) - (aw / ah).atan()).square() * k;
    let alpha = v / (v - iou + (1.0 + EPS));
    iou - (rho2 / diag2 + v * alpha)
}

/// Decoded `[cx, cy, w, h]` in pixels as duals over `(tx, ty, tw, th)`.
pub fn decode_dual(t: [f64; 4], gx: usize, gy: usize, stride: f64, anchor: [f64; 2]) -> [Dual; 4] {
    let s: [Dual; 4] = std::array::from_fn(|i| Dual::var(t[i], i).sigmoid());
    [
        (s[0] * 2.0 + (gx as f64 - 0.5)) * stride,
        (s[1] * 2.0 + (gy as f64 - 0.5)) * stride,
        (s[2] * 2.0).square() * anchor[0],
        (s[3] * 2.0).square() * anchor[1],
    ]
}

/// BCE with logits and its derivative.
fn bce(z: f64, y: f64) -> (f64, f64) {
    (softplus(z) - y * z, sigmoid(z) - y)
}

pub fn detection_loss<T: Scalar>(
    maps: &[&Tensor<T>],
    targets: &Targets,
    geo: &HeadGeometry,
    w: &LossWeights,
) -> Result<LossOutput<T>> {
    w.validate(geo.scales())?;
    if maps.len() != geo.scales() {
        return Err(Error::Contract(format!("expected {} head maps, got {}", geo.scales(), maps.len())));
    }
    for (s, m) in maps.iter().enumerate() {
        if m.shape() != geo.map_shape(s) {
            return Err(Error::shape("detection_loss", m.shape(), &geo.map_shape(s)));
        }
    }
    let mut grads: Vec<Vec<f64>> = maps.iter().map(|m| vec![0.0; m.len()]).collect();
    let at = |s: usize, i: usize| maps[s].data()[i].as_f64();

    let mut obj_loss = 0.0;
    for s in 0..geo.scales() {
        let tgt = targets.objectness(geo, s);
        let cells = geo.grid(s) * geo.grid(s);
        let scale = w.obj_weight * w.obj_balance[s] / tgt.len() as f64;
        let mut sum = 0.0;
        for (j, &y) in tgt.iter().enumerate() {
            let (a, cell) = (j / cells, j % cells);
            let idx = (a * geo.entry() + 4) * cells + cell;
            let (l, d) = bce(at(s, idx), y);
            sum += l;
            grads[s][idx] += scale * d;
        }
        obj_loss += scale * sum;
    }

    let n_pos = targets.positives.len();
    let (mut box_loss, mut cls_loss) = (0.0, 0.0);
    if n_pos > 0 {
        let bscale = w.box_weight / n_pos as f64;
        let cscale = w.cls_weight / (n_pos * geo.num_classes) as f64;
        for p in &targets.positives {
            let idx = |k: usize| geo.index(p.scale, p.anchor, k, p.gy, p.gx);
            let t = [at(p.scale, idx(0)), at(p.scale, idx(1)), at(p.scale, idx(2)), at(p.scale, idx(3))];
            let pred = decode_dual(t, p.gx, p.gy, geo.strides[p.scale] as f64, geo.anchors[p.scale][p.anchor]);
            let l = -(ciou(pred, p.gt)) + 1.0;
            box_loss += bscale * l.v;
            for (k, d) in l.d.iter().enumerate() {
                grads[p.scale][idx(k)] += bscale * d;
            }
            for c in 0..geo.num_classes {
                let y = if c == p.class_id { 1.0 } else { 0.0 };
                let (l, d) = bce(at(p.scale, idx(5 + c)), y);
                cls_loss += cscale * l;
                grads[p.scale][idx(5 + c)] += cscale * d;
            }
        }
    }
    let grads = grads
        .into_iter()
        .zip(maps)
        .map(|(g, m)| Tensor::new(m.shape(), g.into_iter().map(T::from_f64_lossy).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossOutput {
        total: box_loss + obj_loss + cls_loss,
        box_loss,
        obj_loss,
        cls_loss,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Annotation;
    use crate::train::targets::assign_targets;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> HeadGeometry {
        HeadGeometry {
            input_size: 32,
            strides: vec![32],
            anchors: vec![vec![[12.0, 8.0]]],
            num_classes: 3,
        }
    }

    fn toy_weights() -> LossWeights {
        LossWeights {
            obj_balance: vec![1.0],
            ..Default::default()
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn zero_positives_give_zero_box_and_cls() {
        let geo = toy();
        let map = Tensor::<f64>::full(&geo.map_shape(0), 0.3);
        let out = detection_loss(&[&map], &Targets::default(), &geo, &toy_weights()).unwrap();
        assert_eq!(out.box_loss, 0.0);
        assert_eq!(out.cls_loss, 0.0);
        assert!(out.obj_loss > 0.0);
    }

    #[test]
    fn exact_decode_gives_zero_box_loss() {
        let geo = toy();
        // gt centred at 18, 14 px with size 9 x 10
        let (cx, cy, bw, bh) = (18.0, 14.0, 9.0, 10.0);
        let ann = Annotation { class_id: 1, cx: cx / 32.0, cy: cy / 32.0, w: bw / 32.0, h: bh / 32.0 };
        let t = assign_targets(&[ann], &geo);
        assert_eq!(t.positives.len(), 1);
        let mut map = Tensor::<f64>::zeros(&geo.map_shape(0));
        let tx = logit((cx / 32.0 + 0.5) / 2.0);
        let ty = logit((cy / 32.0 + 0.5) / 2.0);
        let tw = logit((bw / 12.0).sqrt() / 2.0);
        let th = logit((bh / 8.0).sqrt() / 2.0);
        map.data_mut()[..4].copy_from_slice(&[tx, ty, tw, th]);
        let out = detection_loss(&[&map], &t, &geo, &toy_weights()).unwrap();
        assert!(out.box_loss.abs() < 1e-9, "{}", out.box_loss);
    }

    #[test]
    fn gradient_matches_finite_differences_on_one_cell_head() {
        let geo = toy();
        let ann = Annotation { class_id: 2, cx: 0.55, cy: 0.4, w: 0.3, h: 0.35 };
        let t = assign_targets(&[ann], &geo);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = Tensor::<f64>::randn(&geo.map_shape(0), 0.7, &mut rng);
        let w = toy_weights();
        let out = detection_loss(&[&map], &t, &geo, &w).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..map.len() {
            let mut p = map.clone();
            p.data_mut()[i] += h;
            let mut m = map.clone();
            m.data_mut()[i] -= h;
            let lp = detection_loss(&[&p], &t, &geo, &w).unwrap().total;
            let lm = detection_loss(&[&m], &t, &geo, &w).unwrap().total;
            let num = (lp - lm) / (2.0 * h);
            let ana = out.grads[0].data()[i];
            worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
        }
        assert!(worst < 1e-3, "max rel err {worst}");
    }

    #[test]
    fn ciou_of_identical_boxes_is_one() {
        let b = [10.0, 12.0, 6.0, 4.0];
        let a = b.map(Dual::constant);
        assert!((ciou(a, b).v - 1.0).abs() < 1e-6);
        let far = [Dual::constant(40.0), Dual::constant(40.0), Dual::constant(6.0), Dual::constant(4.0)];
        assert!(ciou(far, b).v < 0.0);
    }
}
