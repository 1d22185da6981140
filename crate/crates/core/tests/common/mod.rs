//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// Dice and IoU by explicit pixel loops over `0/1` values.
pub fn brute_dice_iou(a: &[u8], b: &[u8]) -> (f64, f64) {
    let mut inter = 0u32;
    let mut union = 0u32;
    let mut size_a = 0u32;
    let mut size_b = 0u32;
    for i in 0..a.len() {
        if a[i] == 1 {
            size_a += 1;
        }
        if b[i] == 1 {
            size_b += 1;
        }
        if a[i] == 1 && b[i] == 1 {
            inter += 1;
        }
        if a[i] == 1 || b[i] == 1 {
            union += 1;
        }
    }
    if union == 0 {
        return (1.0, 1.0);
    }
    (
        2.0 * inter as f64 / (size_a + size_b) as f64,
        inter as f64 / union as f64,
    )
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// Direct 2-D DFT amplitude `|sum x[y,x] e^{-2 pi i (uy/H + vx/W)}|`, row-major.
pub fn direct_dft_amplitude(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re += map[y * w + x] * ang.cos();
                    im += map[y * w + x] * ang.sin();
                }
            }
            out[u * w + v] = (re * re + im * im).sqrt();
        }
    }
    out
}
