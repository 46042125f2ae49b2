//! Orthonormal 2-D discrete Fourier transform over the last two axes.
//!
//! Both directions are scaled by `1/sqrt(H W)`, so the transform is unitary
//! and the inverse is its adjoint.

use std::cell::RefCell;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    if h == 0 || w == 0 {
        return;
    }
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        }
    });
    {
        let buf = data.as_slice_mut().expect("standard layout");
        row_fft.process(buf);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[[y, x]];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            data[[y, x]] = column[y];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.mapv_inplace(|v| v * scale);
}

pub fn fft2(plane: &Array2<f64>) -> Array2<Complex64> {
    let mut data = plane.mapv(|v| Complex64::new(v, 0.0));
    transform(&mut data, false);
    data
}

pub fn fft2_complex(plane: &Array2<Complex64>) -> Array2<Complex64> {
    let mut data = plane.as_standard_layout().into_owned();
    transform(&mut data, false);
    data
}

pub fn ifft2(spectrum: &Array2<Complex64>) -> Array2<Complex64> {
    let mut data = spectrum.as_standard_layout().into_owned();
    transform(&mut data, true);
    data
}

/// Real-valued `fft2` flop count under the `5 N log2 N` convention.
pub fn flops(h: usize, w: usize) -> u64 {
    let n = (h * w) as f64;
    if n <= 1.0 {
        return 0;
    }
    (5.0 * n * n.log2()).round() as u64
}
