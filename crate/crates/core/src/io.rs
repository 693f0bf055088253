//! Output formatting shared by every exported artifact.

/// C `printf("%.17g")`: 17 significant digits, shortest of fixed/exponent
/// notation, trailing zeros stripped. Round-trips every finite `f64`.
pub fn fmt_g17(v: f64) -> String {
    const P: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < P && exp >= -4 {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, v);
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", strip_zeros(mantissa), sign, exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Joins a row of numbers with commas in `%.17g` format.
pub fn csv_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_g17).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_printf() {
        // Reference strings produced by C printf("%.17g").
        let cases: &[(f64, &str)] = &[
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (0.1, "0.10000000000000001"),
            (1.0 / 3.0, "0.33333333333333331"),
            (1e-5, "1.0000000000000001e-05"),
            (1.2345678901234568e17, "1.2345678901234568e+17"),
            (1e21, "1e+21"),
            (6.02214076e23, "6.0221407599999999e+23"),
            (-1.5e-300, "-1.5000000000000001e-300"),
            (0.0001, "0.0001"),
            (1.234e-5, "1.234e-05"),
            (100.0, "100"),
            (std::f64::consts::SQRT_2, "1.4142135623730951"),
            (1e16, "10000000000000000"),
            (1.2345678901234568e16, "12345678901234568"),
        ];
        for (v, s) in cases {
            assert_eq!(fmt_g17(*v), *s, "{v:e}");
        }
    }

    proptest! {
        #[test]
        fn round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = fmt_g17(v);
            prop_assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }
}
