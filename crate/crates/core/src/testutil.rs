use crate::network::{Dataset, Layer, ParamTuple};
use crate::numerics::DenseMatrix;

/// Shape (1,2,1): `W¹ = [[1],[2]]`, `b¹ = 0`, `W² = [[1,-1]]`, `b² = 0.5`.
pub fn theta_a() -> ParamTuple {
    ParamTuple::new(vec![
        Layer {
            weight: DenseMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        },
        Layer {
            weight: DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap(),
            bias: vec![0.5],
        },
    ])
    .unwrap()
}

pub fn dataset_a() -> Dataset {
    Dataset::new(vec![vec![0.0], vec![1.0]], vec![vec![0.5], vec![0.3]]).unwrap()
}
