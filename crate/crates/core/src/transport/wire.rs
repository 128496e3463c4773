//! Line-oriented text encoding of [`Message`].
//!
//! ```text
//! REG id=<string> kind=<lac|tpp|pv|grid>
//! ITER slot=<u> iter=<u> lambda=<f> rho=<f> mean=<f>
//! PRIM id=<string> slot=<u> iter=<u> power=<f>
//! DONE slot=<u> price=<f> converged=<0|1>
//! ERR code=<u> msg="<escaped>"
//! ```
//!
//! Floats use the shortest decimal in scientific notation that parses back to
//! the same `f64` (at most 17 significant digits), so values cross the wire
//! unchanged.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::AgentKind;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register {
        agent_id: String,
        agent_kind: AgentKind,
    },
    Iterate {
        slot: usize,
        iter: usize,
        lambda: f64,
        rho: f64,
        mean_power: f64,
    },
    Primal {
        agent_id: String,
        slot: usize,
        iter: usize,
        power: f64,
    },
    Done {
        slot: usize,
        clearing_price: f64,
        converged: bool,
    },
    Error {
        code: u32,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("field `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("identifier `{0}` must be non-empty and free of whitespace, `=` and `\"`")]
    InvalidId(String),
    #[error("malformed message: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::Malformed(msg.into())
}

fn float(name: &'static str, v: f64) -> Result<String, WireError> {
    if v.is_finite() {
        Ok(format!("{v:e}"))
    } else {
        Err(WireError::NonFinite(name))
    }
}

fn ident(id: &str) -> Result<&str, WireError> {
    let bad = id.is_empty()
        || id
            .chars()
            .any(|c| c.is_whitespace() || c.is_control() || c == '=' || c == '"');
    if bad {
        Err(WireError::InvalidId(id.to_string()))
    } else {
        Ok(id)
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Encodes one message as a newline-terminated line.
pub fn encode_message(m: &Message) -> Result<Vec<u8>, WireError> {
    let line = match m {
        Message::Register {
            agent_id,
            agent_kind,
        } => {
            format!("REG id={} kind={}", ident(agent_id)?, agent_kind)
        }
        Message::Iterate {
            slot,
            iter,
            lambda,
            rho,
            mean_power,
        } => format!(
            "ITER slot={slot} iter={iter} lambda={} rho={} mean={}",
            float("lambda", *lambda)?,
            float("rho", *rho)?,
            float("mean", *mean_power)?
        ),
        Message::Primal {
            agent_id,
            slot,
            iter,
            power,
        } => format!(
            "PRIM id={} slot={slot} iter={iter} power={}",
            ident(agent_id)?,
            float("power", *power)?
        ),
        Message::Done {
            slot,
            clearing_price,
            converged,
        } => format!(
            "DONE slot={slot} price={} converged={}",
            float("price", *clearing_price)?,
            u8::from(*converged)
        ),
        Message::Error { code, detail } => format!("ERR code={code} msg={}", quote(detail)),
    };
    let mut bytes = line.into_bytes();
    bytes.push(b'\n');
    Ok(bytes)
}

/// Splits `key=value` fields; values are bare tokens or double-quoted strings.
fn fields(rest: &str) -> Result<HashMap<String, String>, WireError> {
    let mut out = HashMap::new();
    let mut chars = rest.chars().peekable();
    loop {
        while chars.peek() == Some(&' ') {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        for c in chars.by_ref() {
            if c == '=' {
                break;
            }
            if c == ' ' {
                return Err(malformed(format!("field `{key}` has no value")));
            }
            key.push(c);
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some('n') => value.push('\n'),
                        Some('r') => value.push('\r'),
                        Some('"') => value.push('"'),
                        Some('\\') => value.push('\\'),
                        other => return Err(malformed(format!("bad escape {other:?}"))),
                    },
                    c => value.push(c),
                }
            }
            if !closed {
                return Err(malformed("unterminated quoted value"));
            }
            if chars.peek().is_some_and(|&c| c != ' ') {
                return Err(malformed("garbage after quoted value"));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c == ' ' {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        if key.is_empty() {
            return Err(malformed("empty field name"));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(malformed(format!("duplicate field `{key}`")));
        }
    }
    Ok(out)
}

struct Fields(HashMap<String, String>);

impl Fields {
    fn take(&mut self, key: &str) -> Result<String, WireError> {
        self.0
            .remove(key)
            .ok_or_else(|| malformed(format!("missing field `{key}`")))
    }

    fn uint<U: std::str::FromStr>(&mut self, key: &str) -> Result<U, WireError> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| malformed(format!("field `{key}` is not an unsigned integer: `{v}`")))
    }

    fn float(&mut self, key: &'static str) -> Result<f64, WireError> {
        let v = self.take(key)?;
        let x: f64 = v
            .parse()
            .map_err(|_| malformed(format!("field `{key}` is not a number: `{v}`")))?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(WireError::NonFinite(key))
        }
    }

    fn id(&mut self) -> Result<String, WireError> {
        let v = self.take("id")?;
        ident(&v)?;
        Ok(v)
    }

    fn finish(self) -> Result<(), WireError> {
        match self.0.keys().next() {
            Some(k) => Err(malformed(format!("unexpected field `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Decodes one line (with or without its trailing newline).
pub fn decode_message(line: &[u8]) -> Result<Message, WireError> {
    let text = std::str::from_utf8(line).map_err(|_| malformed("not UTF-8"))?;
    let text = text.strip_suffix('\n').unwrap_or(text);
    let text = text.strip_suffix('\r').unwrap_or(text);
    if text.contains('\n') {
        return Err(malformed("embedded newline"));
    }
    let (tag, rest) = text.split_once(' ').unwrap_or((text, ""));
    let mut f = Fields(fields(rest)?);
    let msg = match tag {
        "REG" => {
            let agent_id = f.id()?;
            let kind = f.take("kind")?;
            let agent_kind = kind.parse().map_err(malformed)?;
            Message::Register {
                agent_id,
                agent_kind,
            }
        }
        "ITER" => Message::Iterate {
            slot: f.uint("slot")?,
            iter: f.uint("iter")?,
            lambda: f.float("lambda")?,
            rho: f.float("rho")?,
            mean_power: f.float("mean")?,
        },
        "PRIM" => Message::Primal {
            agent_id: f.id()?,
            slot: f.uint("slot")?,
            iter: f.uint("iter")?,
            power: f.float("power")?,
        },
        "DONE" => {
            let slot = f.uint("slot")?;
            let clearing_price = f.float("price")?;
            let converged = match f.take("converged")?.as_str() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(malformed(format!(
                        "converged must be 0 or 1, got `{other}`"
                    )))
                }
            };
            Message::Done {
                slot,
                clearing_price,
                converged,
            }
        }
        "ERR" => Message::Error {
            code: f.uint("code")?,
            detail: f.take("msg")?,
        },
        other => return Err(malformed(format!("unknown message type `{other}`"))),
    };
    f.finish()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iterate_round_trips_exactly() {
        let m = Message::Iterate {
            slot: 0,
            iter: 3,
            lambda: 9.87,
            rho: 1.0,
            mean_power: 0.0,
        };
        let bytes = encode_message(&m).unwrap();
        let line = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(line.matches('\n').count(), 1);
        assert!(line.ends_with('\n'));
        for key in ["slot=0", "iter=3", "lambda=", "rho=", "mean="] {
            assert!(line.contains(key), "{line}");
        }
        assert_eq!(decode_message(&bytes).unwrap(), m);
    }

    #[test]
    fn non_finite_payloads_are_rejected() {
        let m = Message::Primal {
            agent_id: "a".into(),
            slot: 0,
            iter: 0,
            power: f64::NAN,
        };
        assert_eq!(encode_message(&m), Err(WireError::NonFinite("power")));
        let m = Message::Iterate {
            slot: 0,
            iter: 0,
            lambda: f64::INFINITY,
            rho: 1.0,
            mean_power: 0.0,
        };
        assert!(encode_message(&m).is_err());
        assert!(decode_message(b"PRIM id=a slot=0 iter=0 power=NaN").is_err());
        assert!(decode_message(b"PRIM id=a slot=0 iter=0 power=inf").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        for bad in [
            &b"HELLO x=1"[..],
            b"ITER slot=0 iter=0 lambda=1 rho=1",
            b"ITER slot=0 iter=0 lambda=1 rho=1 mean=0 extra=2",
            b"ITER slot=0 slot=0 iter=0 lambda=1 rho=1 mean=0",
            b"ITER slot=-1 iter=0 lambda=1 rho=1 mean=0",
            b"REG id=a kind=wind",
            b"DONE slot=0 price=1 converged=2",
            b"ERR code=1 msg=\"open",
            b"PRIM id= slot=0 iter=0 power=1",
        ] {
            assert!(
                decode_message(bad).is_err(),
                "{}",
                String::from_utf8_lossy(bad)
            );
        }
    }

    fn id() -> impl Strategy<Value = String> {
        "[A-Za-z0-9_.:-]{1,12}"
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            any::<f64>().prop_filter("finite", |x| x.is_finite()),
            -1e4f64..1e4,
            Just(0.0),
            Just(-0.0),
            Just(f64::MIN_POSITIVE),
        ]
    }

    fn kind() -> impl Strategy<Value = AgentKind> {
        prop_oneof![
            Just(AgentKind::Lac),
            Just(AgentKind::Tpp),
            Just(AgentKind::Pv),
            Just(AgentKind::Grid)
        ]
    }

    fn message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (id(), kind()).prop_map(|(agent_id, agent_kind)| Message::Register {
                agent_id,
                agent_kind
            }),
            (any::<usize>(), any::<usize>(), finite(), finite(), finite()).prop_map(
                |(slot, iter, lambda, rho, mean_power)| Message::Iterate {
                    slot,
                    iter,
                    lambda,
                    rho,
                    mean_power
                }
            ),
            (id(), any::<usize>(), any::<usize>(), finite()).prop_map(
                |(agent_id, slot, iter, power)| Message::Primal {
                    agent_id,
                    slot,
                    iter,
                    power
                }
            ),
            (any::<usize>(), finite(), any::<bool>()).prop_map(
                |(slot, clearing_price, converged)| Message::Done {
                    slot,
                    clearing_price,
                    converged
                }
            ),
            (any::<u32>(), any::<String>())
                .prop_map(|(code, detail)| Message::Error { code, detail }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn decode_inverts_encode(m in message()) {
            let bytes = encode_message(&m).unwrap();
            prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
            let back = decode_message(&bytes).unwrap();
            // Bitwise float identity, including the sign of zero.
            match (&m, &back) {
                (Message::Iterate { lambda: a, rho: b, mean_power: c, .. },
                 Message::Iterate { lambda: x, rho: y, mean_power: z, .. }) => {
                    prop_assert_eq!(a.to_bits(), x.to_bits());
                    prop_assert_eq!(b.to_bits(), y.to_bits());
                    prop_assert_eq!(c.to_bits(), z.to_bits());
                }
                (Message::Primal { power: a, .. }, Message::Primal { power: b, .. }) => {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
                _ => {}
            }
            prop_assert_eq!(back, m);
        }
    }
}
