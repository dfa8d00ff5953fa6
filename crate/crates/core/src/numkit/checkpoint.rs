//! Plain-text checkpoint container.
//!
//! ```text
//! e2ediff-checkpoint 1
//! kind <name>
//! meta <key> <value>
//! net <name> <layer count>
//! layer <in> <out> <activation>
//! w <in*out values, row-major (in, out)>
//! b <out values>
//! array <name> <rows> <cols>
//! v <rows*cols values, row-major>
//! end
//! ```
//!
//! Values are written with `{:e}`, the shortest representation that parses
//! back to the same bits, so save/load is bit-exact.

use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use super::mlp::{Activation, DenseLayer, Mlp};
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &str = "e2ediff-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    kind: String,
    meta: Vec<(String, String)>,
    nets: Vec<(String, Mlp)>,
    arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Vec::new(),
            nets: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn with_meta(mut self, key: &str, value: impl Display) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with_net(mut self, name: &str, net: &Mlp) -> Self {
        self.nets.push((name.to_string(), net.clone()));
        self
    }

    pub fn with_array(mut self, name: &str, array: &Tensor) -> Self {
        self.arrays.push((name.to_string(), array.clone()));
        self
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("meta `{key}` has bad value `{raw}`")))
    }

    pub fn net(&self, name: &str) -> Result<Mlp> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing network `{name}`")))
    }

    pub fn array(&self, name: &str) -> Result<Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, net) in &self.nets {
            writeln!(out, "net {name} {}", net.layers().len()).unwrap();
            for layer in net.layers() {
                writeln!(
                    out,
                    "layer {} {} {}",
                    layer.in_dim(),
                    layer.out_dim(),
                    layer.activation()
                )
                .unwrap();
                write_values(&mut out, "w", layer.weights().data());
                write_values(&mut out, "b", layer.bias().data());
            }
        }
        for (name, a) in &self.arrays {
            writeln!(out, "array {name} {} {}", a.rows(), a.cols()).unwrap();
            write_values(&mut out, "v", a.data());
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(Error::Checkpoint("not an e2ediff checkpoint".into())),
        }
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("truncated before {what}")))
        };
        let (_, kind_line) = next("kind")?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Checkpoint("missing kind line".into()))?;
        let mut ck = Checkpoint::new(kind);
        loop {
            let (no, line) = next("end")?;
            let mut parts = line.splitn(2, ' ');
            let tag = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match tag {
                "end" => break,
                "meta" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad_line(no, "meta needs a key and a value"))?;
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                "net" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 2 {
                        return Err(bad_line(no, "net needs a name and layer count"));
                    }
                    let count: usize = parse_field(no, f[1])?;
                    let mut layers = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (lno, header) = next("layer")?;
                        let h: Vec<&str> = header.split(' ').collect();
                        if h.len() != 4 || h[0] != "layer" {
                            return Err(bad_line(lno, "expected `layer <in> <out> <act>`"));
                        }
                        let in_dim: usize = parse_field(lno, h[1])?;
                        let out_dim: usize = parse_field(lno, h[2])?;
                        let act: Activation = h[3].parse()?;
                        let (wno, wl) = next("weights")?;
                        let w = read_values(wno, wl, "w", in_dim * out_dim)?;
                        let (bno, bl) = next("bias")?;
                        let b = read_values(bno, bl, "b", out_dim)?;
                        layers.push(DenseLayer::new(
                            Tensor::matrix(in_dim, out_dim, w)?,
                            Tensor::new(vec![out_dim], b)?,
                            act,
                        )?);
                    }
                    ck.nets.push((f[0].to_string(), Mlp::from_layers(layers)?));
                }
                "array" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad_line(no, "array needs a name, rows and cols"));
                    }
                    let rows: usize = parse_field(no, f[1])?;
                    let cols: usize = parse_field(no, f[2])?;
                    let (vno, vl) = next("values")?;
                    let v = read_values(vno, vl, "v", rows * cols)?;
                    ck.arrays
                        .push((f[0].to_string(), Tensor::matrix(rows, cols, v)?));
                }
                other => return Err(bad_line(no, &format!("unknown record `{other}`"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }
}

/// Saves a bare network as a `mlp` checkpoint.
pub fn save_mlp(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new("mlp").with_net("net", net).save(path)
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("mlp")?;
    ck.net("net")
}

fn write_values(out: &mut String, tag: &str, values: &[f64]) {
    out.push_str(tag);
    for v in values {
        write!(out, " {v:e}").unwrap();
    }
    out.push('\n');
}

fn read_values(line_no: usize, line: &str, tag: &str, expected: usize) -> Result<Vec<f64>> {
    let mut it = line.split(' ');
    if it.next() != Some(tag) {
        return Err(bad_line(line_no, &format!("expected `{tag}` values")));
    }
    let values = it
        .map(|s| parse_field::<f64>(line_no, s))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(bad_line(
            line_no,
            &format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn parse_field<T: FromStr>(line_no: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| bad_line(line_no, &format!("cannot parse `{s}`")))
}

fn bad_line(line_no: usize, msg: &str) -> Error {
    Error::Checkpoint(format!("line {line_no}: {msg}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{LayerSpec, Parameterized};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_net(seed: u64) -> Mlp {
        let specs = LayerSpec::chain(&[3, 7, 5, 2], Activation::Softplus, Activation::Linear);
        Mlp::init(&specs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn mlp_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = sample_net(5);
        save_mlp(&net, &path).unwrap();
        let back = load_mlp(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.checksum(), net.checksum());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_text("hello").is_err());
        let text = Checkpoint::new("mlp").with_net("net", &sample_net(1)).to_text();
        let cut = &text[..text.len() / 2];
        assert!(Checkpoint::from_text(cut).is_err());
        let wrong_kind = Checkpoint::from_text(&text).unwrap();
        assert!(wrong_kind.expect_kind("codec").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(values in proptest::collection::vec(
            prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()),
                        Just(f64::MIN_POSITIVE), Just(-0.0), Just(5e-324)],
            1..40,
        )) {
            let a = Tensor::matrix(1, values.len(), values.clone()).unwrap();
            let ck = Checkpoint::new("x").with_meta("n", 3).with_array("a", &a);
            let back = Checkpoint::from_text(&ck.to_text()).unwrap();
            let got = back.array("a").unwrap();
            for (x, y) in got.data().iter().zip(&values) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back.meta_parse::<usize>("n").unwrap(), 3);
        }
    }
}
