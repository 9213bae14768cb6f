//! Minimal SVG line charts for run output. Reads the per-cell CSVs and
//! renders accuracy, server cost, and reward against the round index,
//! one series per strategy.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },
}

/// One parsed CSV: the series this module knows how to chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub strategy: String,
    pub rounds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub cost: Vec<f64>,
    pub reward: Vec<f64>,
}

fn schema_err(path: &Path, message: impl Into<String>) -> PlotError {
    PlotError::Schema { path: path.display().to_string(), message: message.into() }
}

/// Parse one run CSV, validating the fixed column prefix.
pub fn parse_series(path: &Path) -> Result<Series, PlotError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PlotError::Io { path: path.display().to_string(), source })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| schema_err(path, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let expected = [
        "round",
        "strategy",
        "seed",
        "accuracy",
        "loss",
        "reward",
        "rho_total",
        "server_cost_accuracy_term",
        "server_cost_reward_term",
        "server_cost_total",
    ];
    if cols.len() < expected.len() || cols[..expected.len()] != expected {
        return Err(schema_err(path, format!("unexpected header '{header}'")));
    }

    let mut series = Series {
        strategy: String::new(),
        rounds: Vec::new(),
        accuracy: Vec::new(),
        cost: Vec::new(),
        reward: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(schema_err(
                path,
                format!("row {} has {} fields, header has {}", lineno + 2, fields.len(), cols.len()),
            ));
        }
        let num = |idx: usize| -> Result<f64, PlotError> {
            fields[idx].parse::<f64>().map_err(|_| {
                schema_err(path, format!("row {}: '{}' is not a number", lineno + 2, fields[idx]))
            })
        };
        series.rounds.push(num(0)?);
        series.accuracy.push(num(3)?);
        series.reward.push(num(5)?);
        series.cost.push(num(9)?);
        if series.strategy.is_empty() {
            series.strategy = fields[1].to_string();
        } else if series.strategy != fields[1] {
            return Err(schema_err(path, "mixed strategies in one file"));
        }
    }
    if series.rounds.is_empty() {
        return Err(schema_err(path, "no data rows"));
    }
    Ok(series)
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn axis_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Render one chart over the given per-strategy series. Multiple files
/// for the same strategy (different seeds) are averaged pointwise.
pub fn render_chart(title: &str, series: &[(String, Vec<f64>, Vec<f64>)]) -> String {
    let (x_lo, x_hi) = axis_bounds(series.iter().flat_map(|(_, xs, _)| xs.iter().copied()));
    let (y_lo, y_hi) = axis_bounds(series.iter().flat_map(|(_, _, ys)| ys.iter().copied()));
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0
    ));

    // Axes with a handful of labeled ticks.
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B,
    ));
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{:.3}</text>\n",
            px(fx),
            HEIGHT - MARGIN_B + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{:.3}</text>\n",
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            fy
        ));
    }

    for (i, (name, xs, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>\n",
            WIDTH - MARGIN_R + 34.0,
            WIDTH - MARGIN_R + 40.0,
            ly + 4.0,
            x = WIDTH - MARGIN_R + 10.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn mean_by_strategy(
    parsed: &[Series],
    pick: impl Fn(&Series) -> &Vec<f64>,
) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut groups: BTreeMap<&str, Vec<&Series>> = BTreeMap::new();
    for s in parsed {
        groups.entry(&s.strategy).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(name, members)| {
            let len = members.iter().map(|s| s.rounds.len()).min().unwrap_or(0);
            let xs = members[0].rounds[..len].to_vec();
            let ys = (0..len)
                .map(|i| {
                    members.iter().map(|s| pick(s)[i]).sum::<f64>() / members.len() as f64
                })
                .collect();
            (name.to_string(), xs, ys)
        })
        .collect()
}

/// Parse the CSVs and write the three standard charts into `out_dir`.
pub fn plot_files(paths: &[std::path::PathBuf], out_dir: &Path) -> Result<Vec<String>, PlotError> {
    let parsed: Vec<Series> = paths.iter().map(|p| parse_series(p)).collect::<Result<_, _>>()?;
    if parsed.is_empty() {
        return Err(PlotError::Schema {
            path: "<none>".into(),
            message: "no input files".into(),
        });
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|source| PlotError::Io { path: out_dir.display().to_string(), source })?;

    let charts = [
        ("accuracy.svg", "Test accuracy by round", mean_by_strategy(&parsed, |s| &s.accuracy)),
        ("server_cost.svg", "Server cost by round", mean_by_strategy(&parsed, |s| &s.cost)),
        ("reward.svg", "Reward by round", mean_by_strategy(&parsed, |s| &s.reward)),
    ];
    let mut written = Vec::new();
    for (name, title, series) in charts {
        let svg = render_chart(title, &series);
        let path = out_dir.join(name);
        std::fs::write(&path, svg)
            .map_err(|source| PlotError::Io { path: path.display().to_string(), source })?;
        written.push(name.to_string());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const HEADER: &str = "round,strategy,seed,accuracy,loss,reward,rho_total,\
         server_cost_accuracy_term,server_cost_reward_term,server_cost_total";

    fn write_csv(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{body}").unwrap();
        path
    }

    #[test]
    fn parses_well_formed_csv() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}\n1,qi_dpfl,0,0.5,1.1,2,4,1,1,2\n2,qi_dpfl,0,0.6,0.9,2,4,1,1,2");
        let path = write_csv(dir.path(), "a.csv", &body);
        let s = parse_series(&path).unwrap();
        assert_eq!(s.strategy, "qi_dpfl");
        assert_eq!(s.accuracy, vec![0.5, 0.6]);
        assert_eq!(s.cost, vec![2.0, 2.0]);
    }

    #[test]
    fn rejects_empty_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_csv(dir.path(), "empty.csv", "");
        assert!(matches!(parse_series(&empty), Err(PlotError::Schema { .. })));

        let bad_header = write_csv(dir.path(), "bad.csv", "round,foo\n1,2");
        assert!(matches!(parse_series(&bad_header), Err(PlotError::Schema { .. })));

        let no_rows = write_csv(dir.path(), "norows.csv", HEADER);
        assert!(matches!(parse_series(&no_rows), Err(PlotError::Schema { .. })));

        let ragged = format!("{HEADER}\n1,qi_dpfl,0,0.5");
        let ragged = write_csv(dir.path(), "ragged.csv", &ragged);
        assert!(matches!(parse_series(&ragged), Err(PlotError::Schema { .. })));
    }

    #[test]
    fn writes_three_svgs() {
        let dir = tempfile::tempdir().unwrap();
        let body_a = format!("{HEADER}\n1,fedavg,0,0.5,1.1,0,0,0,0,0\n2,fedavg,0,0.6,0.9,0,0,0,0,0");
        let body_b = format!("{HEADER}\n1,qi_dpfl,0,0.4,1.2,2,4,1,1,2\n2,qi_dpfl,0,0.7,0.8,2,4,1,1,2");
        let a = write_csv(dir.path(), "a.csv", &body_a);
        let b = write_csv(dir.path(), "b.csv", &body_b);
        let out = dir.path().join("plots");
        let written = plot_files(&[a, b], &out).unwrap();
        assert_eq!(written.len(), 3);
        for name in written {
            let text = std::fs::read_to_string(out.join(name)).unwrap();
            assert!(text.starts_with("<svg"));
            assert!(text.contains("fedavg") && text.contains("qi_dpfl"));
            assert_eq!(text.matches("<polyline").count(), 2);
        }
    }
}
