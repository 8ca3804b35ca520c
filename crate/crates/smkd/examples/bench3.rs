use smkd::tensor::Tensor;
use std::time::Instant;

fn main() {
    let a = Tensor::<f32>::full(&[816, 64], 0.5);
    let b = Tensor::<f32>::full(&[64, 192], 0.25);
    let bt = Tensor::<f32>::full(&[192, 64], 0.25);
    let reps = 200;

    // warmup
    for _ in 0..20 { let _ = a.matmul(&b).unwrap(); }

    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.matmul(&b).unwrap(); }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 816.0 * 64.0 * 192.0 * reps as f64;
    println!("matmul_nn [816x64]x[64x192]: {:.2} GF/s", flops / dt / 1e9);

    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.matmul_nt(&bt).unwrap(); }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_nt: {:.2} GF/s", flops / dt / 1e9);

    let g = Tensor::<f32>::full(&[816, 192], 0.1);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = a.transpose().unwrap(); }
    println!("transpose 816x64 x{reps}: {:?}", t0.elapsed());

    // tn via backward path: time raw kernel through public matmul of transposed
    let at = Tensor::<f32>::full(&[64, 816], 0.5);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = at.matmul(&g).unwrap(); }
    let dt = t0.elapsed().as_secs_f64();
    let flops_tn = 2.0 * 64.0 * 816.0 * 192.0 * reps as f64;
    println!("nn-as-tn-shape [64x816]x[816x192]: {:.2} GF/s", flops_tn / dt / 1e9);
}
