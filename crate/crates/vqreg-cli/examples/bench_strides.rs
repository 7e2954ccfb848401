use std::time::Instant;

#[allow(clippy::too_many_arguments)]
fn bench(
    name: &str,
    m: usize, k: usize, n: usize,
    a_len: usize, b_len: usize, c_len: usize,
    rsa: isize, csa: isize, rsb: isize, csb: isize, rsc: isize, csc: isize,
    reps: usize,
) {
    let a = vec![1.0f32; a_len];
    let b = vec![1.0f32; b_len];
    let mut c = vec![0.0f32; c_len];
    let t = Instant::now();
    for _ in 0..reps {
        unsafe {
            <f32 as vqreg_nn::Gemm>::gemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
    let gf = (2.0 * (m * k * n * reps) as f64) / t.elapsed().as_secs_f64() / 1e9;
    println!("{name}: {gf:.1} GF/s");
}

fn main() {
    let (co, kk, p) = (8usize, 216usize, 24576usize);
    // current forward: out[co][p] = W[co][kk] x col[kk][p]
    bench("fwd current  (m=co)", co, kk, p, co*kk, kk*p, co*p,
          kk as isize, 1, p as isize, 1, p as isize, 1, 20);
    // transposed forward: same result array, column-major interpretation
    bench("fwd transposed (m=p)", p, kk, co, kk*p, co*kk, co*p,
          1, p as isize, 1, kk as isize, 1, p as isize, 20);
    // current dX: dcol[kk][p] = W^T x g
    bench("dx current  (m=kk)", kk, co, p, co*kk, co*p, kk*p,
          1, kk as isize, p as isize, 1, p as isize, 1, 20);
    // transposed dX
    bench("dx transposed (m=p)", p, co, kk, co*p, co*kk, kk*p,
          1, p as isize, kk as isize, 1, 1, p as isize, 20);
    // dW: co x p x kk
    bench("dw current  (m=co)", co, p, kk, co*p, kk*p, co*kk,
          p as isize, 1, 1, p as isize, kk as isize, 1, 20);
    // decoder-size variants (ci=24 -> kk=648)
    let kk2 = 648;
    bench("fwd current  dec (kk=648)", co, kk2, p, co*kk2, kk2*p, co*p,
          kk2 as isize, 1, p as isize, 1, p as isize, 1, 10);
    bench("fwd transposed dec (kk=648)", p, kk2, co, kk2*p, co*kk2, co*p,
          1, p as isize, 1, kk2 as isize, 1, p as isize, 10);
}
