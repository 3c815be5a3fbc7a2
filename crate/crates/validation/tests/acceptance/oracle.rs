//! Textbook covariance-form EKF for one node ranging to beacons whose states
//! are known exactly. Written against the model equations only.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x5, Matrix5, Vector3, Vector5};

pub struct Ranging {
    pub c: f64,
    pub t_rsp1: f64,
    pub kappa: f64,
}

pub fn transition(dt: f64) -> Matrix5<f64> {
    let mut f = Matrix5::identity();
    f[(3, 4)] = dt;
    f
}

/// `[d, r, Γ]` seen by the node with state `x` from beacon `b`.
pub fn observe(x: &Vector5<f64>, b: &Vector5<f64>, rg: &Ranging) -> Vector3<f64> {
    let dp = b.fixed_rows::<3>(0) - x.fixed_rows::<3>(0);
    let dist = dp.norm();
    let db = b[4] - x[4];
    Vector3::new(
        b[3] - x[3] + dist / rg.c,
        dist + 0.5 * rg.c * rg.t_rsp1 * db,
        dist + rg.kappa * db,
    )
}

pub fn observe_jacobian(x: &Vector5<f64>, b: &Vector5<f64>, rg: &Ranging) -> Matrix3x5<f64> {
    let dp = b.fixed_rows::<3>(0) - x.fixed_rows::<3>(0);
    let u = dp / dp.norm();
    let mut j = Matrix3x5::zeros();
    for i in 0..3 {
        j[(0, i)] = -u[i] / rg.c;
        j[(1, i)] = -u[i];
        j[(2, i)] = -u[i];
    }
    j[(0, 3)] = -1.0;
    j[(1, 4)] = -0.5 * rg.c * rg.t_rsp1;
    j[(2, 4)] = -rg.kappa;
    j
}

pub struct Ekf {
    pub x: Vector5<f64>,
    pub p: Matrix5<f64>,
}

impl Ekf {
    pub fn predict(&mut self, dt: f64, q: &Matrix5<f64>) {
        let f = transition(dt);
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
    }

    /// Stacked update over all beacons, Joseph form. The innovation
    /// covariance is solved after scaling to unit diagonal because its
    /// entries span many decades.
    pub fn update(
        &mut self,
        beacons: &[Vector5<f64>],
        ys: &[Vector3<f64>],
        r: &Matrix3<f64>,
        rg: &Ranging,
    ) {
        let m = 3 * beacons.len();
        let mut h = DMatrix::zeros(m, 5);
        let mut v = DVector::zeros(m);
        let mut rr = DMatrix::zeros(m, m);
        for (i, (b, y)) in beacons.iter().zip(ys).enumerate() {
            h.view_mut((3 * i, 0), (3, 5))
                .copy_from(&observe_jacobian(&self.x, b, rg));
            v.rows_mut(3 * i, 3)
                .copy_from(&(y - observe(&self.x, b, rg)));
            rr.view_mut((3 * i, 3 * i), (3, 3)).copy_from(r);
        }
        let p = DMatrix::from_column_slice(5, 5, self.p.as_slice());
        let s = &h * &p * h.transpose() + &rr;
        let d = DVector::from_iterator(m, (0..m).map(|i| 1.0 / s[(i, i)].sqrt()));
        let ds = DMatrix::from_diagonal(&d);
        let s_scaled = &ds * &s * &ds;
        let s_inv = &ds * s_scaled.cholesky().expect("S is SPD").inverse() * &ds;
        let k = &p * h.transpose() * s_inv;
        let x = DVector::from_column_slice(self.x.as_slice()) + &k * v;
        let a = DMatrix::identity(5, 5) - &k * &h;
        let p_new = &a * &p * a.transpose() + &k * &rr * k.transpose();
        self.x = Vector5::from_column_slice(x.as_slice());
        self.p = Matrix5::from_column_slice(p_new.as_slice());
        self.p = 0.5 * (self.p + self.p.transpose());
    }
}
