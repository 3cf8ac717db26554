//! CSV dump of tokens for debugging: one row per token,
//! `window,t_i,t_e,row,col,v0,...,v{n-1}`.

use std::io::{self, Write};

use super::TokenSet;

pub fn token_csv_header(token_dim: usize) -> String {
    let mut h = String::from("window,t_i,t_e,row,col");
    for i in 0..token_dim {
        h.push_str(&format!(",v{i}"));
    }
    h
}

pub fn write_token_csv_rows(
    out: &mut impl Write,
    window: usize,
    t_i: i64,
    t_e: i64,
    tokens: &TokenSet,
) -> io::Result<()> {
    for tok in &tokens.tokens {
        write!(out, "{window},{t_i},{t_e},{},{}", tok.row, tok.col)?;
        for v in &tok.data {
            // shortest repr that round-trips
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PatchToken;

    #[test]
    fn rows_match_header_width() {
        let ts = TokenSet {
            tokens: vec![PatchToken {
                row: 1,
                col: 2,
                data: vec![0.0, 0.5, 1.0],
            }],
            grid_rows: 3,
            grid_cols: 3,
        };
        let mut buf = Vec::new();
        write_token_csv_rows(&mut buf, 4, 96_000, 120_000, &ts).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line, "4,96000,120000,1,2,0.0,0.5,1.0\n");
        assert_eq!(
            token_csv_header(3).split(',').count(),
            line.trim().split(',').count()
        );
    }
}
