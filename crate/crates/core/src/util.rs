//! Small integer helpers shared by protocols and bound formulas.

/// ceil(log2(x)) for x >= 1; 0 for x <= 1.
pub fn ceil_log2(x: u64) -> u32 {
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

/// floor(sqrt(x)).
pub fn isqrt(x: u64) -> u64 {
    if x < 2 {
        return x;
    }
    let mut r = (x as f64).sqrt() as u64;
    while r.saturating_mul(r) > x {
        r -= 1;
    }
    while (r + 1).saturating_mul(r + 1) <= x {
        r += 1;
    }
    r
}

/// ceil(sqrt(x)).
pub fn isqrt_ceil(x: u64) -> u64 {
    let r = isqrt(x);
    if r * r == x {
        r
    } else {
        r + 1
    }
}

/// Iterated log: log2*(x) with the convention log2*(x) = 0 for x <= 1.
pub fn log2_star(x: f64) -> u32 {
    let mut v = x;
    let mut k = 0;
    while v > 1.0 {
        v = v.log2();
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(0), 0);
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(5), 3);
        assert_eq!(ceil_log2(1024), 10);
        assert_eq!(ceil_log2(1025), 11);
    }

    #[test]
    fn isqrt_values() {
        for x in 0..2000u64 {
            let r = isqrt(x);
            assert!(r * r <= x && (r + 1) * (r + 1) > x, "x={x}");
            let c = isqrt_ceil(x);
            assert!(c * c >= x && (c.saturating_sub(1)) * (c.saturating_sub(1)) < x || x == 0);
        }
    }

    #[test]
    fn log2_star_values() {
        assert_eq!(log2_star(1.0), 0);
        assert_eq!(log2_star(2.0), 1);
        assert_eq!(log2_star(4.0), 2);
        assert_eq!(log2_star(16.0), 3);
        assert_eq!(log2_star(65536.0), 4);
        assert_eq!(log2_star(64.0), 4);
    }
}
