//! CSV float formatting: scientific notation with 9 significant digits, so
//! identical runs produce identical bytes.

pub fn f9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{:.8e}", x)
}

pub fn f9_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => f9(v),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(f9(1.0), "1.00000000e0");
        assert_eq!(f9(0.5), "5.00000000e-1");
        assert_eq!(f9(0.0), "0");
        assert_eq!(f9(-12345.6789), "-1.23456789e4");
    }

    #[test]
    fn empty_for_missing() {
        assert_eq!(f9_opt(None), "");
    }
}
