//! Benchmark kernels available to every scenario.

use super::kernel::KernelFunction;

/// Annotated device source for the built-in kernels.
pub const BUILTIN_SOURCE: &str = r#"// Built-in kernels. Bodies are simulated; only the annotations are parsed.

#pragma hdarray use(A,(0,*)) use(B,(*,0)) def(C,(0,0))
__kernel void gemm(__global double *A, __global double *B, __global double *C,
                   double alpha, double beta, int ni, int nj, int nk) { }

#pragma hdarray use(A,(0,*)) use(B,(*,0)) def(D,(0,0))
__kernel void mm2_k1(__global double *A, __global double *B, __global double *D) { }

#pragma hdarray use(C,(0,*)) use(D,(*,0)) def(E,(0,0))
__kernel void mm2_k2(__global double *C, __global double *D, __global double *E) { }

#pragma hdarray use(B,(0,-1)) use(B,(0,+1)) use(B,(-1,0)) use(B,(+1,0)) def(A,(0,0))
__kernel void jacobi_step(__global double *A, __global double *B) { }

#pragma hdarray use(A,(0,0)) def(B,(0,0))
__kernel void jacobi_copy(__global double *A, __global double *B) { }

#pragma hdarray use(A,(-1,-1)) use(A,(-1,0)) use(A,(-1,+1)) \
                use(A,(0,-1))  use(A,(0,0))  use(A,(0,+1))  \
                use(A,(+1,-1)) use(A,(+1,0)) use(A,(+1,+1)) def(B,(0,0))
__kernel void conv2d(__global double *A, __global double *B) { }

#pragma hdarray use@(data) def@(symmat)
__kernel void corr_upper(__global double *data, __global double *symmat) { }

#pragma hdarray use@(symmat) def@(symmat)
__kernel void corr_mirror(__global double *symmat) { }
"#;

fn gemm_like(slots: [&str; 3], alpha_default: f64) -> KernelFunction {
    KernelFunction::new(&slots, move |w, cx| {
        let (i, j) = (w[0], w[1]);
        let alpha = cx.scalar_or(0, alpha_default);
        let nk = cx.extent(0, 1);
        let mut acc = 0.0;
        for k in 0..nk {
            acc += alpha * cx.read(0, &[i, k])? * cx.read(1, &[k, j])?;
        }
        cx.write(2, &[i, j], acc)
    })
}

const CONV: [[f64; 3]; 3] = [[0.2, -0.3, 0.4], [0.5, 0.6, 0.7], [-0.8, -0.9, 0.1]];

pub fn builtin_kernels() -> Vec<(&'static str, KernelFunction)> {
    vec![
        ("gemm", gemm_like(["A", "B", "C"], 1.0)),
        ("mm2_k1", gemm_like(["A", "B", "D"], 1.0)),
        ("mm2_k2", gemm_like(["C", "D", "E"], 1.0)),
        (
            "jacobi_step",
            KernelFunction::new(&["A", "B"], |w, cx| {
                let (i, j) = (w[0], w[1]);
                let s = cx.read(1, &[i, j - 1])?
                    + cx.read(1, &[i, j + 1])?
                    + cx.read(1, &[i - 1, j])?
                    + cx.read(1, &[i + 1, j])?;
                cx.write(0, &[i, j], 0.25 * s)
            }),
        ),
        (
            "jacobi_copy",
            KernelFunction::new(&["A", "B"], |w, cx| {
                let v = cx.read(0, w)?;
                cx.write(1, w, v)
            }),
        ),
        (
            "conv2d",
            KernelFunction::new(&["A", "B"], |w, cx| {
                let (i, j) = (w[0], w[1]);
                let mut acc = 0.0;
                // column-major over the stencil, as in the reference code
                for (dj, col) in CONV.iter().enumerate() {
                    for (di, c) in col.iter().enumerate() {
                        acc += c * cx.read(0, &[i + di as i64 - 1, j + dj as i64 - 1])?;
                    }
                }
                cx.write(1, &[i, j], acc)
            }),
        ),
        (
            "corr_upper",
            KernelFunction::new(&["data", "symmat"], |w, cx| {
                let (i, j) = (w[0], w[1]);
                if j < i {
                    return Ok(());
                }
                let n = cx.extent(0, 0);
                let mut acc = 0.0;
                for k in 0..n {
                    acc += cx.read(0, &[k, i])? * cx.read(0, &[k, j])?;
                }
                cx.write(1, &[i, j], acc)
            }),
        ),
        (
            "corr_mirror",
            KernelFunction::new(&["symmat"], |w, cx| {
                let (i, j) = (w[0], w[1]);
                if j >= i {
                    return Ok(());
                }
                let v = cx.read(0, &[j, i])?;
                cx.write(0, &[i, j], v)
            }),
        ),
    ]
}

/// Serial reference for `gemm` with the same summation order.
pub fn reference_gemm(a: &[f64], b: &[f64], ni: usize, nk: usize, nj: usize, alpha: f64) -> Vec<f64> {
    let mut c = vec![0.0; ni * nj];
    for i in 0..ni {
        for j in 0..nj {
            let mut acc = 0.0;
            for k in 0..nk {
                acc += alpha * a[i * nk + k] * b[k * nj + j];
            }
            c[i * nj + j] = acc;
        }
    }
    c
}
