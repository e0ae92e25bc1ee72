//! Helpers shared by the integration tests: a dense factorization oracle
//! and artifact-comparison utilities.
#![allow(dead_code)]

use homog::sparse::Csr;

/// Gaussian elimination with partial pivoting. Quadratic storage, cubic
/// work; fine for the few hundred unknowns the oracles use.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        assert!(a[piv][col].abs() > 1e-14, "singular matrix at column {col}");
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in (row + 1)..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

pub fn dense_from_csr(k: &Csr) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; k.n]; k.n];
    for i in 0..k.n {
        for t in k.row_ptr[i]..k.row_ptr[i + 1] {
            m[i][k.col_idx[t]] = k.vals[t];
        }
    }
    m
}

/// Drop the named trailing column from every CSV row; wall-clock columns are
/// outside the byte-reproducibility promise.
pub fn strip_csv_column(csv: &str, column: &str) -> String {
    let mut lines = csv.lines();
    let header = lines.next().expect("csv has a header");
    let cols: Vec<&str> = header.split(',').collect();
    let pos = match cols.iter().position(|c| *c == column) {
        Some(p) => p,
        None => return csv.to_string(),
    };
    assert_eq!(pos, cols.len() - 1, "only trailing columns can be stripped");
    let mut out = String::new();
    out.push_str(&cols[..pos].join(","));
    out.push('\n');
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        out.push_str(&fields[..pos].join(","));
        out.push('\n');
    }
    out
}

/// The `config` and `results` sections of a report, reserialized; wall
/// times live only under `timings`, which is excluded on purpose.
pub fn reproducible_json_part(raw: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(raw).expect("valid report json");
    let obj = v.as_object().expect("report is an object");
    assert!(obj.contains_key("config"), "report has a config section");
    assert!(obj.contains_key("results"), "report has a results section");
    assert!(obj.contains_key("timings"), "report has a timings section");
    serde_json::to_string(&serde_json::json!({
        "config": obj["config"],
        "results": obj["results"],
    }))
    .unwrap()
}
