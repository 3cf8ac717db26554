use std::fmt::Write as _;

/// One row of the cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub name: String,
    pub patch_size: usize,
    pub mean_tokens: f64,
    pub total_patches: usize,
    pub window_ms: f64,
    pub latency_ms: Option<f64>,
    pub sparse_gflops: f64,
    pub dense_gflops: f64,
    pub params: usize,
}

impl ProfileRow {
    pub fn activation_ratio(&self) -> f64 {
        self.mean_tokens / self.total_patches as f64
    }

    pub fn ratio(&self) -> f64 {
        self.dense_gflops / self.sparse_gflops
    }
}

const HEADER: [&str; 9] = [
    "config",
    "P",
    "|T|/|P|",
    "dt_ms",
    "latency_ms",
    "sparse_GFLOPs",
    "dense_GFLOPs",
    "ratio",
    "params_M",
];

fn cells(r: &ProfileRow) -> [String; 9] {
    [
        r.name.clone(),
        r.patch_size.to_string(),
        format!(
            "{:.1}/{} ({:.3})",
            r.mean_tokens,
            r.total_patches,
            r.activation_ratio()
        ),
        format!("{}", r.window_ms),
        r.latency_ms
            .map(|l| format!("{l:.3}"))
            .unwrap_or_else(|| "-".into()),
        format!("{:.4}", r.sparse_gflops),
        format!("{:.4}", r.dense_gflops),
        format!("{:.2}", r.ratio()),
        format!("{:.3}", r.params as f64 / 1e6),
    ]
}

/// Column-aligned table.
pub fn report_text(rows: &[ProfileRow]) -> String {
    let body: Vec<[String; 9]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..9)
        .map(|i| {
            body.iter()
                .map(|r| r[i].len())
                .chain([HEADER[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, vals: &[&str]| {
        let parts: Vec<String> = vals
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &HEADER);
    for r in &body {
        line(&mut s, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    s
}

pub fn report_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("config,patch_size,mean_tokens,total_patches,activation_ratio,window_ms,latency_ms,sparse_gflops,dense_gflops,ratio,params\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.patch_size,
            r.mean_tokens,
            r.total_patches,
            r.activation_ratio(),
            r.window_ms,
            r.latency_ms.map(|l| l.to_string()).unwrap_or_default(),
            r.sparse_gflops,
            r.dense_gflops,
            r.ratio(),
            r.params
        );
    }
    s
}
