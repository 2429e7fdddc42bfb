//! f32 matrix multiply with an AVX-512 microkernel, used when the CPU
//! supports it; callers fall back to `matrixmultiply` otherwise.
//!
//! C (m x n, row-major) = alpha * A (m x k) * B (k x n) + beta * C, with
//! arbitrary input strides. Packing is BLIS-style: B into column panels of
//! width NR, A into row panels of height MR, so the microkernel streams
//! contiguous memory.

#![allow(unsafe_op_in_unsafe_fn)]

const MR: usize = 8;
const NR: usize = 48; // three 16-lane vectors
const KC: usize = 256;
const NC: usize = 480; // 10 panels of NR

/// True when the AVX-512 path is usable on this CPU.
pub fn avx512_available() -> bool {
    is_x86_feature_detected!("avx512f")
}

/// # Safety
/// Pointers must cover the strided extents implied by (m, k, n) and the
/// stride arguments; `c` is row-major contiguous (ldc = n) and must not
/// alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
pub unsafe fn sgemm_avx512(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: *const f32,
    rsa: isize,
    csa: isize,
    b: *const f32,
    rsb: isize,
    csb: isize,
    beta: f32,
    c: *mut f32,
) {
    debug_assert!(avx512_available());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        scale_c(m * n, beta, c);
        return;
    }
    // pack buffers are reused across calls on each thread
    thread_local! {
        static PACKS: std::cell::RefCell<(Vec<f32>, Vec<f32>)> =
            const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
    }
    PACKS.with(|cell| {
        let (bpack, apack) = &mut *cell.borrow_mut();
        bpack.resize(KC * NC, 0.0);
        let a_need = m.div_ceil(MR) * MR * KC;
        if apack.len() < a_need {
            apack.resize(a_need, 0.0);
        }
        sgemm_blocked(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, apack, bpack);
    });
}

#[allow(clippy::too_many_arguments)]
unsafe fn sgemm_blocked(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: *const f32,
    rsa: isize,
    csa: isize,
    b: *const f32,
    rsb: isize,
    csb: isize,
    beta: f32,
    c: *mut f32,
    apack: &mut [f32],
    bpack: &mut [f32],
) {
    let mut jc = 0;
    while jc < n {
        let nc = NC.min(n - jc);
        let mut pc = 0;
        while pc < k {
            let kc = KC.min(k - pc);
            // pack B block (kc x nc) into NR-wide panels, k-major inside
            pack_b(bpack, b, rsb, csb, pc, jc, kc, nc);
            let first = pc == 0;
            let mut ic = 0;
            while ic < m {
                let mc = m - ic; // A is small in this workload; no MC blocking
                pack_a(apack, a, rsa, csa, ic, pc, mc, kc);
                run_block(
                    apack, bpack, mc, kc, nc, alpha,
                    if first { beta } else { 1.0 },
                    c, ic, jc, n,
                );
                ic += mc;
            }
            pc += kc;
        }
        jc += nc;
    }
}

fn scale_c(len: usize, beta: f32, c: *mut f32) {
    unsafe {
        if beta == 0.0 {
            std::ptr::write_bytes(c, 0, len);
        } else if beta != 1.0 {
            for i in 0..len {
                *c.add(i) *= beta;
            }
        }
    }
}

/// bpack layout: panel p (NR columns) occupies kc*NR floats, row-major by k.
unsafe fn pack_b(
    bpack: &mut [f32],
    b: *const f32,
    rsb: isize,
    csb: isize,
    pc: usize,
    jc: usize,
    kc: usize,
    nc: usize,
) {
    let mut panel = 0;
    let mut j0 = 0;
    while j0 < nc {
        let w = NR.min(nc - j0);
        let dst_base = panel * kc * NR;
        if csb == 1 {
            for kk in 0..kc {
                let src_row = b.offset((pc + kk) as isize * rsb + (jc + j0) as isize);
                let dst = &mut bpack[dst_base + kk * NR..dst_base + kk * NR + NR];
                std::ptr::copy_nonoverlapping(src_row, dst.as_mut_ptr(), w);
                for d in dst.iter_mut().take(NR).skip(w) {
                    *d = 0.0;
                }
            }
        } else if rsb == 1 {
            // column-strided source (a transposed view): iterate columns so
            // every source read is contiguous in k
            for jj in 0..w {
                let src_col = b.offset((jc + j0 + jj) as isize * csb + pc as isize);
                for kk in 0..kc {
                    bpack[dst_base + kk * NR + jj] = *src_col.add(kk);
                }
            }
            if w < NR {
                for kk in 0..kc {
                    for jj in w..NR {
                        bpack[dst_base + kk * NR + jj] = 0.0;
                    }
                }
            }
        } else {
            for kk in 0..kc {
                let src_row = b.offset((pc + kk) as isize * rsb + (jc + j0) as isize * csb);
                let dst = &mut bpack[dst_base + kk * NR..dst_base + kk * NR + NR];
                for (jj, d) in dst.iter_mut().enumerate().take(w) {
                    *d = *src_row.offset(jj as isize * csb);
                }
                for d in dst.iter_mut().take(NR).skip(w) {
                    *d = 0.0;
                }
            }
        }
        panel += 1;
        j0 += w;
    }
}

/// apack layout: panel p (MR rows) occupies kc*MR floats, k-major: for each
/// k, MR row values.
unsafe fn pack_a(
    apack: &mut [f32],
    a: *const f32,
    rsa: isize,
    csa: isize,
    ic: usize,
    pc: usize,
    mc: usize,
    kc: usize,
) {
    let mut panel = 0;
    let mut i0 = 0;
    while i0 < mc {
        let h = MR.min(mc - i0);
        let dst_base = panel * kc * MR;
        for kk in 0..kc {
            let dst = &mut apack[dst_base + kk * MR..dst_base + kk * MR + MR];
            for (ii, d) in dst.iter_mut().enumerate() {
                *d = if ii < h {
                    *a.offset((ic + i0 + ii) as isize * rsa + (pc + kk) as isize * csa)
                } else {
                    0.0
                };
            }
        }
        panel += 1;
        i0 += h;
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn run_block(
    apack: &[f32],
    bpack: &[f32],
    mc: usize,
    kc: usize,
    nc: usize,
    alpha: f32,
    beta: f32,
    c: *mut f32,
    ic: usize,
    jc: usize,
    ldc: usize,
) {
    let mut jr = 0;
    let mut bpanel = 0;
    while jr < nc {
        let w = NR.min(nc - jr);
        let mut ir = 0;
        let mut apanel = 0;
        while ir < mc {
            let h = MR.min(mc - ir);
            microkernel_8x48(
                &apack[apanel * kc * MR..],
                &bpack[bpanel * kc * NR..],
                kc,
                h,
                w,
                alpha,
                beta,
                c.add((ic + ir) * ldc + jc + jr),
                ldc,
            );
            ir += h;
            apanel += 1;
        }
        jr += w;
        bpanel += 1;
    }
}

/// 8 x 48 register tile: 24 named accumulators, 3 B vectors per k step,
/// software prefetch a few steps ahead.
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn microkernel_8x48(
    apanel: &[f32],
    bpanel: &[f32],
    kc: usize,
    h: usize,
    w: usize,
    alpha: f32,
    beta: f32,
    c: *mut f32,
    ldc: usize,
) {
    use std::arch::x86_64::*;
    let a = apanel.as_ptr();
    let b = bpanel.as_ptr();
    macro_rules! accs {
        ($($n:ident)*) => { $(let mut $n = _mm512_setzero_ps();)* };
    }
    accs!(c00 c01 c02 c10 c11 c12 c20 c21 c22 c30 c31 c32
          c40 c41 c42 c50 c51 c52 c60 c61 c62 c70 c71 c72);
    let mut kk = 0;
    macro_rules! kstep {
        ($kk:expr) => {{
            let off = $kk * NR;
            _mm_prefetch::<_MM_HINT_T0>(b.add(off + 8 * NR) as *const i8);
            _mm_prefetch::<_MM_HINT_T0>(b.add(off + 8 * NR + 32) as *const i8);
            let b0 = _mm512_loadu_ps(b.add(off));
            let b1 = _mm512_loadu_ps(b.add(off + 16));
            let b2 = _mm512_loadu_ps(b.add(off + 32));
            macro_rules! row {
                ($i:literal, $r0:ident, $r1:ident, $r2:ident) => {{
                    let av = _mm512_set1_ps(*a.add($kk * MR + $i));
                    $r0 = _mm512_fmadd_ps(av, b0, $r0);
                    $r1 = _mm512_fmadd_ps(av, b1, $r1);
                    $r2 = _mm512_fmadd_ps(av, b2, $r2);
                }};
            }
            row!(0, c00, c01, c02);
            row!(1, c10, c11, c12);
            row!(2, c20, c21, c22);
            row!(3, c30, c31, c32);
            row!(4, c40, c41, c42);
            row!(5, c50, c51, c52);
            row!(6, c60, c61, c62);
            row!(7, c70, c71, c72);
        }};
    }
    while kk + 2 <= kc {
        kstep!(kk);
        kstep!(kk + 1);
        kk += 2;
    }
    while kk < kc {
        kstep!(kk);
        kk += 1;
    }
    let acc: [[__m512; 3]; MR] = [
        [c00, c01, c02],
        [c10, c11, c12],
        [c20, c21, c22],
        [c30, c31, c32],
        [c40, c41, c42],
        [c50, c51, c52],
        [c60, c61, c62],
        [c70, c71, c72],
    ];
    let av = _mm512_set1_ps(alpha);
    let bv = _mm512_set1_ps(beta);
    let full: u64 = (1u64 << w.min(48)) - 1;
    let masks = [
        (full & 0xFFFF) as u16,
        ((full >> 16) & 0xFFFF) as u16,
        ((full >> 32) & 0xFFFF) as u16,
    ];
    for (i, row) in acc.iter().enumerate().take(h) {
        for (v, &val) in row.iter().enumerate() {
            let mask = masks[v];
            if mask == 0 {
                continue;
            }
            let ptr = c.add(i * ldc + v * 16);
            let cur = _mm512_maskz_loadu_ps(mask, ptr);
            let scaled = _mm512_mul_ps(val, av);
            let out = if beta == 0.0 { scaled } else { _mm512_fmadd_ps(cur, bv, scaled) };
            _mm512_mask_storeu_ps(ptr, mask, out);
        }
    }
}
