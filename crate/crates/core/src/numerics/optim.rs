use super::tensor::ParamTensor;

/// One SGD-with-momentum update over `params`, followed by zeroing the
/// gradients:
///
/// ```text
/// buffer <- momentum * buffer + grad
/// value  <- value - lr * buffer
/// ```
pub fn sgd_momentum_step<'a>(
    params: impl IntoIterator<Item = &'a mut ParamTensor>,
    lr: f32,
    momentum: f32,
) {
    assert!(lr > 0.0, "learning rate must be positive, got {lr}");
    assert!(
        (0.0..1.0).contains(&momentum),
        "momentum must lie in [0, 1), got {momentum}"
    );
    for p in params {
        let ParamTensor {
            value,
            grad,
            momentum: buffer,
        } = p;
        for ((v, g), b) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(buffer.data_mut().iter_mut())
        {
            *b = momentum * *b + *g;
            *v -= lr * *b;
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn param(values: &[f32], grads: &[f32]) -> ParamTensor {
        let mut p = ParamTensor::new(Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        p.grad.data_mut().copy_from_slice(grads);
        p
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        sgd_momentum_step([&mut p], 0.1, 0.9);
        assert_eq!(p.value.data(), [1.0, -2.0]);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut p = param(&[1.0, -2.0], &[0.5, 1.0]);
        sgd_momentum_step([&mut p], 0.1, 0.0);
        assert_eq!(p.value.data(), [1.0 - 0.05, -2.0 - 0.1]);
        assert_eq!(p.grad.data(), [0.0, 0.0]);
    }

    #[test]
    fn unit_lr_subtracts_gradient_exactly() {
        let mut p = param(&[0.75, 3.0], &[0.25, -1.5]);
        sgd_momentum_step([&mut p], 1.0, 0.0);
        assert_eq!(p.value.data(), [0.5, 4.5]);
    }

    #[test]
    fn second_momentum_step_is_1_9_g() {
        let (lr, g) = (0.01f32, 2.0f32);
        let mut p = param(&[0.0], &[g]);
        sgd_momentum_step([&mut p], lr, 0.9);
        let after_first = p.value.data()[0];
        p.grad.data_mut()[0] = g;
        sgd_momentum_step([&mut p], lr, 0.9);
        let delta = after_first - p.value.data()[0];
        assert!((delta - lr * 1.9 * g).abs() < 1e-7);
    }
}
