use super::{Tensor, Var};

impl<'t> Var<'t> {
    /// Sum of all elements (accumulated in f64) as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum_f64() as f32);
        self.tape().record(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f32)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new([2, 3], vec![1., -2., 3., 4., 5., 6.]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_half_sum_of_squares_is_identity() {
        let tape = Tape::new();
        let vals = vec![0.5, -1.25, 2.0, 3.5];
        let x = tape.param(Tensor::new([4], vals.clone()).unwrap());
        let loss = x.mul(x).unwrap().sum().scale(0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), vals.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros([3]));
        assert!(tape.backward(x.square()).is_err());
    }

    #[test]
    fn mean_divides_by_count() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new([4], vec![1., 2., 3., 6.]).unwrap());
        assert_eq!(x.mean().item(), 3.0);
    }
}
