use std::time::Instant;

fn one_gemm(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t = Instant::now();
    for _ in 0..reps {
        unsafe {
            <f32 as vqreg_nn::Gemm>::gemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    (2.0 * (m * k * n * reps) as f64) / t.elapsed().as_secs_f64() / 1e9
}

fn main() {
    // single-thread baseline
    println!("single 8x216x24576: {:.1} GF/s", one_gemm(8, 216, 24576, 20));
    // two threads of the same shape
    let t = Instant::now();
    let handles: Vec<_> = (0..2)
        .map(|_| std::thread::spawn(|| one_gemm(8, 216, 24576, 20)))
        .collect();
    let rates: Vec<f64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let wall = t.elapsed().as_secs_f64();
    let total_flops = 2.0 * 2.0 * (8.0 * 216.0 * 24576.0 * 20.0);
    println!("two threads: per-thread {:?} GF/s, combined {:.1} GF/s", rates, total_flops / wall / 1e9);
    // transposed layout: m large, n = 8
    println!("single 24576x216x8: {:.1} GF/s", one_gemm(24576, 216, 8, 20));
    // bigger-m shape for reference
    println!("single 64x1728x48: {:.1} GF/s", one_gemm(64, 1728, 48, 100));
}
