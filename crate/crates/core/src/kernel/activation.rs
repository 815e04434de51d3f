use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 })
        .expect("relu_backward shapes")
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_forward(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |v, g| {
        let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
        let t = u.tanh();
        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    })
    .expect("gelu_backward shapes")
}
