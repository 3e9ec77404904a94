//! Direct "same" convolution kernels.

use super::tape::ConvPadding;

fn padded(x: &[f64], cin: usize, h: usize, w: usize, p: usize, padding: ConvPadding) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; cin * hp * wp];
    for c in 0..cin {
        for r in 0..hp {
            let sr = match padding {
                ConvPadding::Periodic => (r + h - p) % h,
                ConvPadding::Zero => {
                    if r < p || r >= h + p {
                        continue;
                    }
                    r - p
                }
            };
            let src = &x[(c * h + sr) * w..(c * h + sr + 1) * w];
            let dst = &mut out[(c * hp + r) * wp..(c * hp + r + 1) * wp];
            dst[p..p + w].copy_from_slice(src);
            if padding == ConvPadding::Periodic {
                for q in 0..p {
                    dst[q] = src[(w - p + q) % w];
                    dst[p + w + q] = src[q % w];
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    padding: ConvPadding,
) -> Vec<f64> {
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, kk) = (ks[0], ks[2]);
    let p = kk / 2;
    let wp = w + 2 * p;
    let hp = h + 2 * p;
    let xp = padded(x, cin, h, w, p, padding);
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for ci in 0..cin {
            let src = &xp[ci * hp * wp..(ci + 1) * hp * wp];
            for ky in 0..kk {
                for kx in 0..kk {
                    let wt = k[((co * cin + ci) * kk + ky) * kk + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        let s = &src[(r + ky) * wp + kx..(r + ky) * wp + kx + w];
                        let d = &mut plane[r * w..(r + 1) * w];
                        for (d, s) in d.iter_mut().zip(s) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    padding: ConvPadding,
    g: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, kk) = (ks[0], ks[2]);
    let p = kk / 2;
    let (hp, wp) = (h + 2 * p, w + 2 * p);

    let gk = want_kernel.then(|| {
        let xp = padded(x, cin, h, w, p, padding);
        let mut gk = vec![0.0; k.len()];
        for co in 0..cout {
            let gplane = &g[co * h * w..(co + 1) * h * w];
            for ci in 0..cin {
                let src = &xp[ci * hp * wp..(ci + 1) * hp * wp];
                for ky in 0..kk {
                    for kx in 0..kk {
                        let mut acc = 0.0;
                        for r in 0..h {
                            let s = &src[(r + ky) * wp + kx..(r + ky) * wp + kx + w];
                            let gr = &gplane[r * w..(r + 1) * w];
                            acc += s.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gk[((co * cin + ci) * kk + ky) * kk + kx] = acc;
                    }
                }
            }
        }
        gk
    });

    let gx = want_input.then(|| {
        let mut gp = vec![0.0; cin * hp * wp];
        for co in 0..cout {
            let gplane = &g[co * h * w..(co + 1) * h * w];
            for ci in 0..cin {
                let dst = &mut gp[ci * hp * wp..(ci + 1) * hp * wp];
                for ky in 0..kk {
                    for kx in 0..kk {
                        let wt = k[((co * cin + ci) * kk + ky) * kk + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        for r in 0..h {
                            let d = &mut dst[(r + ky) * wp + kx..(r + ky) * wp + kx + w];
                            let gr = &gplane[r * w..(r + 1) * w];
                            for (d, s) in d.iter_mut().zip(gr) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
        let mut gx = vec![0.0; cin * h * w];
        for c in 0..cin {
            for r in 0..hp {
                let tr = match padding {
                    ConvPadding::Periodic => (r + h - p) % h,
                    ConvPadding::Zero => {
                        if r < p || r >= h + p {
                            continue;
                        }
                        r - p
                    }
                };
                for col in 0..wp {
                    let tc = match padding {
                        ConvPadding::Periodic => (col + w - p) % w,
                        ConvPadding::Zero => {
                            if col < p || col >= w + p {
                                continue;
                            }
                            col - p
                        }
                    };
                    gx[(c * h + tr) * w + tc] += gp[(c * hp + r) * wp + col];
                }
            }
        }
        gx
    });

    (gx, gk)
}
