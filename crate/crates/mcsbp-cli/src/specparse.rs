//! Parsers for the small `--f` / `--g` vector specs:
//!
//! - `const:0.5` — the constant on every type of the truncation,
//! - `ind:1,3` or `ind:1,3:0.5` — (scaled) indicator of a type set,
//! - `list:1=0.5,2=0.25` — explicit entries.

use anyhow::{bail, Context, Result};
use mcsbp::model::TypeVector;

pub fn parse_type_vector(spec: &str, n: usize) -> Result<TypeVector> {
    let (kind, rest) = spec
        .split_once(':')
        .with_context(|| format!("vector spec {spec:?} needs a kind prefix like const:"))?;
    match kind {
        "const" => {
            let theta: f64 = rest.parse().context("const: takes a number")?;
            Ok(TypeVector::constant(theta, n))
        }
        "ind" => {
            let (set_part, theta) = match rest.rsplit_once(':') {
                Some((s, th)) => (s, th.parse::<f64>().context("indicator scale")?),
                None => (rest, 1.0),
            };
            let set = parse_set(set_part)?;
            for &i in &set {
                if i > n {
                    bail!("indicator type {i} outside the truncation [{n}]");
                }
            }
            Ok(TypeVector::indicator(&set, theta))
        }
        "list" => {
            let mut pairs = Vec::new();
            for item in rest.split(',') {
                let (i, v) = item
                    .split_once('=')
                    .with_context(|| format!("list entries look like 2=0.5, got {item:?}"))?;
                let i: usize = i.trim().parse().context("list type index")?;
                let v: f64 = v.trim().parse().context("list value")?;
                if i == 0 || i > n {
                    bail!("list type {i} outside the truncation [{n}]");
                }
                pairs.push((i, v));
            }
            Ok(TypeVector::from_pairs(&pairs)?)
        }
        other => bail!("unknown vector spec kind {other:?} (use const, ind, or list)"),
    }
}

pub fn parse_set(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            let i: usize = s.trim().parse().context("type set entries are integers")?;
            if i == 0 {
                bail!("type indices are 1-based");
            }
            Ok(i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_kinds() {
        let v = parse_type_vector("const:0.5", 3).unwrap();
        assert_eq!(v.get(2), 0.5);
        let v = parse_type_vector("ind:1,3", 3).unwrap();
        assert_eq!(v.get(1), 1.0);
        assert_eq!(v.get(2), 0.0);
        let v = parse_type_vector("ind:2:0.25", 3).unwrap();
        assert_eq!(v.get(2), 0.25);
        let v = parse_type_vector("list:1=0.5,2=0.25", 3).unwrap();
        assert_eq!(v.get(2), 0.25);
        assert!(parse_type_vector("nope:1", 3).is_err());
        assert!(parse_type_vector("list:9=1", 3).is_err());
    }
}
