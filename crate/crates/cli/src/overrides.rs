//! `section.key=value` overrides applied on top of a run config.

use promptseg::config::RunConfig;

/// Bad flags or values; the binary exits with status 2 for these.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Accepts `--a.b=v`, `--a.b v` and `a.b=v`.
pub fn parse_pairs(args: &[String]) -> Result<Vec<(String, String)>, UsageError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg.strip_prefix("--").unwrap_or(arg);
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None if arg.starts_with("--") => {
                let v = it
                    .next()
                    .ok_or_else(|| UsageError(format!("override `{arg}` needs a value")))?;
                (body.to_string(), v.clone())
            }
            None => return Err(UsageError(format!("cannot parse override `{arg}` (expected key=value)"))),
        };
        if !key.contains('.') || key.split('.').any(str::is_empty) {
            return Err(UsageError(format!("override key `{key}` must look like section.field")));
        }
        out.push((key, value));
    }
    Ok(out)
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply(cfg: &RunConfig, pairs: &[(String, String)]) -> Result<RunConfig, UsageError> {
    let mut root = toml::Value::try_from(cfg).map_err(|e| UsageError(e.to_string()))?;
    for (key, raw) in pairs {
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("non-empty key");
        let mut table = root.as_table_mut().expect("config serialises to a table");
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| UsageError(format!("unknown config section `{p}` in `{key}`")))?;
        }
        table.insert(last.to_string(), parse_value(raw));
    }
    let mut out: RunConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid override: {}", e.message())))?;
    out.sync();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn forms() {
        let p = parse_pairs(&s(&["--a.b=1", "--c.d", "x", "e.f=true"])).unwrap();
        assert_eq!(p, vec![("a.b".into(), "1".into()), ("c.d".into(), "x".into()), ("e.f".into(), "true".into())]);
        assert!(parse_pairs(&s(&["--a.b"])).is_err());
        assert!(parse_pairs(&s(&["--ab=1"])).is_err());
        assert!(parse_pairs(&s(&["junk"])).is_err());
    }

    #[test]
    fn applies_typed_values() {
        let cfg = apply(
            &RunConfig::default(),
            &parse_pairs(&s(&[
                "--prompt.use_cnn_encoder=false",
                "--train.epochs=3",
                "--train.lr_override=0.001",
                "--sampling.strategy=case",
            ]))
            .unwrap(),
        )
        .unwrap();
        assert!(!cfg.prompt.use_cnn_encoder);
        assert!(!cfg.model.prompt.use_cnn_encoder);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_override, Some(0.001));
        assert_eq!(cfg.sampling.strategy.to_string(), "case");
    }

    #[test]
    fn rejects_bad_values_and_keys() {
        for bad in ["--sampling.strategy=bogus", "--train.epochs=many", "--train.nope=1", "--nope.x=1"] {
            assert!(apply(&RunConfig::default(), &parse_pairs(&s(&[bad])).unwrap()).is_err(), "{bad}");
        }
    }
}
