//! Adapter checkpoints: one header line naming the family, shapes, ranks and
//! frozen index lists, followed by each component in the matrix text format.
//!
//! ```text
//! adapter family=CABR h=8 d=6 r=2 m=3 cols=1,4 rows=0,7
//! <C> <R> <W_A> <W_B>
//! ```
//! LoRA stores `A` then `B` (plus `scaling`), CUR-LoRA stores `C`, `R`, `U`.

use std::collections::BTreeMap;

use super::{Adapter, CabrAdapter, CurLoraAdapter, LoraAdapter};
use crate::cur::CurSelection;
use crate::error::{Error, Result};
use crate::matrix::{numbered_lines, read_matrix, write_matrix, Matrix};
use crate::scalar::Scalar;

fn join(idx: &[usize]) -> String {
    idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_checkpoint<T: Scalar>(adapter: &Adapter<T>, shape: (usize, usize)) -> String {
    let (h, d) = shape;
    let mut out = String::new();
    match adapter {
        Adapter::None => {
            out.push_str(&format!("adapter family=NONE h={h} d={d}\n"));
        }
        Adapter::Lora(a) => {
            out.push_str(&format!(
                "adapter family=LORA h={h} d={d} r={} scaling={:.16e}\n",
                a.rank(),
                a.scaling.to_f64_lossy()
            ));
            out.push_str(&write_matrix(&a.a));
            out.push_str(&write_matrix(&a.b));
        }
        Adapter::CurLora(a) => {
            out.push_str(&format!(
                "adapter family=CURLORA h={h} d={d} r={} cols={} rows={}\n",
                a.selection.rank(),
                join(&a.selection.col_indices),
                join(&a.selection.row_indices)
            ));
            out.push_str(&write_matrix(&a.selection.c));
            out.push_str(&write_matrix(&a.selection.r_mat));
            out.push_str(&write_matrix(&a.u));
        }
        Adapter::Cabr(a) => {
            out.push_str(&format!(
                "adapter family=CABR h={h} d={d} r={} m={} cols={} rows={}\n",
                a.r(),
                a.m(),
                join(&a.selection.col_indices),
                join(&a.selection.row_indices)
            ));
            out.push_str(&write_matrix(a.c()));
            out.push_str(&write_matrix(a.r_mat()));
            out.push_str(&write_matrix(&a.w_a));
            out.push_str(&write_matrix(&a.w_b));
        }
    }
    out
}

struct Header {
    line: usize,
    fields: BTreeMap<String, String>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.fields.get(key).map(String::as_str).ok_or_else(|| Error::Parse {
            line: self.line,
            msg: format!("missing header field `{key}`"),
        })
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)?.parse().map_err(|e| Error::Parse {
            line: self.line,
            msg: format!("field `{key}`: {e}"),
        })
    }

    fn indices(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .split(',')
            .map(|t| {
                t.parse().map_err(|e| Error::Parse {
                    line: self.line,
                    msg: format!("field `{key}`: {e}"),
                })
            })
            .collect()
    }
}

/// Parses a checkpoint produced by [`write_checkpoint`], returning the adapter
/// and the `(h, d)` shape of the weight it was built for.
pub fn read_checkpoint<T: Scalar>(text: &str) -> Result<(Adapter<T>, (usize, usize))> {
    let mut lines = numbered_lines(text);
    let (line, head) = lines.next().ok_or(Error::Parse {
        line: 0,
        msg: "empty checkpoint".into(),
    })?;
    let mut tokens = head.split_whitespace();
    if tokens.next() != Some("adapter") {
        return Err(Error::Parse {
            line,
            msg: "checkpoint must start with `adapter`".into(),
        });
    }
    let fields = tokens
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("expected key=value, got {t:?}"),
                })
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let header = Header { line, fields };
    let shape = (header.usize("h")?, header.usize("d")?);

    let check = |m: &Matrix<T>, want: (usize, usize), what: &str| -> Result<()> {
        if m.shape() != want {
            return Err(Error::Parse {
                line,
                msg: format!("{what} is {:?}, header implies {want:?}", m.shape()),
            });
        }
        Ok(())
    };

    let adapter = match header.get("family")? {
        "NONE" => Adapter::None,
        "LORA" => {
            let r = header.usize("r")?;
            let scaling: f64 = header.get("scaling")?.parse().map_err(|e| Error::Parse {
                line,
                msg: format!("field `scaling`: {e}"),
            })?;
            let a = read_matrix(&mut lines)?;
            let b = read_matrix(&mut lines)?;
            check(&a, (shape.0, r), "A")?;
            check(&b, (r, shape.1), "B")?;
            Adapter::Lora(LoraAdapter {
                a,
                b,
                scaling: T::lit(scaling),
            })
        }
        "CURLORA" => {
            let r = header.usize("r")?;
            let selection = read_selection(&header, &mut lines, shape, r)?;
            let u = read_matrix(&mut lines)?;
            check(&u, (r, r), "U")?;
            Adapter::CurLora(CurLoraAdapter { selection, u })
        }
        "CABR" => {
            let (r, m) = (header.usize("r")?, header.usize("m")?);
            let selection = read_selection(&header, &mut lines, shape, r)?;
            let w_a = read_matrix(&mut lines)?;
            let w_b = read_matrix(&mut lines)?;
            check(&w_a, (r, m), "W_A")?;
            check(&w_b, (m, r), "W_B")?;
            Adapter::Cabr(CabrAdapter::from_parts(selection, w_a, w_b)?)
        }
        other => {
            return Err(Error::Parse {
                line,
                msg: format!("unknown adapter family {other:?}"),
            })
        }
    };
    if let Some((extra, _)) = lines.next() {
        return Err(Error::Parse {
            line: extra,
            msg: "trailing data after checkpoint".into(),
        });
    }
    Ok((adapter, shape))
}

fn read_selection<'a, T: Scalar>(
    header: &Header,
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    shape: (usize, usize),
    r: usize,
) -> Result<CurSelection<T>> {
    let col_indices = header.indices("cols")?;
    let row_indices = header.indices("rows")?;
    let c: Matrix<T> = read_matrix(lines)?;
    let r_mat: Matrix<T> = read_matrix(lines)?;
    if col_indices.len() != r || row_indices.len() != r || c.shape() != (shape.0, r) || r_mat.shape() != (r, shape.1) {
        return Err(Error::Parse {
            line: header.line,
            msg: "selection components disagree with header".into(),
        });
    }
    Ok(CurSelection {
        col_indices,
        row_indices,
        c,
        r_mat,
    })
}
