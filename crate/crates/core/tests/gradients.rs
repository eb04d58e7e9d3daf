//! Finite-difference checks for every differentiable op.

use uidet_core::autodiff::gradcheck::grad_check;
use uidet_core::tensor::Tensor;

const ATOMIC: f64 = 1e-4;

fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&mut uidet_core::autodiff::Graph<f64>, &[uidet_core::autodiff::Var]) -> uidet_core::Result<uidet_core::autodiff::Var>) {
    let r = grad_check(shapes, 42, f).unwrap();
    assert!(r.max_rel_err < ATOMIC, "{name}: {r:?}");
}

#[test]
fn matmul_gradient() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]));
}

#[test]
fn sum_of_product_gradient_wrt_a() {
    // d sum(A.B) / dA = rowsum(B) broadcast, checked numerically
    check("sum(matmul)", &[&[2, 3], &[3, 5]], |g, x| {
        let p = g.matmul(x[0], x[1])?;
        Ok(g.sum_all(p))
    });
}

#[test]
fn conv2d_gradients() {
    check("conv2d 3x3 s1 p1", &[&[2, 4, 4], &[3, 2, 3, 3], &[3]], |g, x| {
        g.conv2d(x[0], x[1], Some(x[2]), 1, 1)
    });
    check("conv2d 3x3 s2 p1", &[&[2, 5, 5], &[2, 2, 3, 3], &[2]], |g, x| {
        g.conv2d(x[0], x[1], Some(x[2]), 2, 1)
    });
    check("conv2d 1x1", &[&[3, 3, 3], &[2, 3, 1, 1]], |g, x| g.conv2d(x[0], x[1], None, 1, 0));
}

#[test]
fn softmax_gradient() {
    check("softmax_rows", &[&[3, 5]], |g, x| g.softmax_rows(x[0]));
}

#[test]
fn elementwise_gradients() {
    check("sigmoid", &[&[7]], |g, x| Ok(g.sigmoid(x[0])));
    check("silu", &[&[7]], |g, x| Ok(g.silu(x[0])));
    check("add", &[&[2, 3], &[2, 3]], |g, x| g.add(x[0], x[1]));
    check("scale", &[&[4]], |g, x| Ok(g.scale(x[0], -1.7)));
    check("mul_scalar", &[&[2, 3], &[1]], |g, x| g.mul_scalar(x[0], x[1]));
}

#[test]
fn structural_gradients() {
    check("concat_channels", &[&[2, 3, 3], &[1, 3, 3]], |g, x| g.concat_channels(x[0], x[1]));
    check("concat_cols", &[&[4, 2], &[4, 3]], |g, x| g.concat_cols(x[0], x[1]));
    check("upsample", &[&[2, 2, 3]], |g, x| g.upsample_nearest2x(x[0]));
    check("maxpool 5/1/2", &[&[2, 4, 4]], |g, x| g.maxpool2d(x[0], 5, 1, 2));
    check("maxpool 3/2/1", &[&[1, 5, 5]], |g, x| g.maxpool2d(x[0], 3, 2, 1));
    check("transpose", &[&[3, 4]], |g, x| g.transpose(x[0]));
    check("reshape", &[&[3, 4]], |g, x| g.reshape(x[0], &[2, 6]));
    check("add_row_bias", &[&[3, 4], &[4]], |g, x| g.add_row_bias(x[0], x[1]));
    check("channel_affine", &[&[3, 2, 2], &[3], &[3]], |g, x| g.channel_affine(x[0], x[1], x[2]));
}

#[test]
fn bce_gradient() {
    let targets = Tensor::from_fn(&[2, 3], |i| [0.0, 1.0, 0.5, 0.25, 1.0, 0.0][i]);
    check("bce_with_logits", &[&[2, 3]], move |g, x| g.bce_with_logits(x[0], &targets));
}
