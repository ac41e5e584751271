//! Text renderings of training and evaluation artifacts. Every artifact
//! opens with the configuration echo (CSV: `# key=value` lines, JSON: a
//! `config` object) and the seed.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{AggregateReport, EpisodeLog, MetaTest};

/// Ordered `key=value` pairs describing the run.
pub type ConfigEcho = BTreeMap<String, String>;

pub const LOSS_HEADER: [&str; 6] = [
    "episode",
    "meta_ce",
    "entropy_dist",
    "open_bce",
    "total",
    "lr",
];

fn csv_with_echo<F>(echo: &ConfigEcho, header: &[String], fill: F) -> String
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    for (k, v) in echo {
        buf.extend_from_slice(format!("# {k}={v}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).expect("in-memory write");
        fill(&mut w).expect("in-memory write");
        w.flush().expect("in-memory write");
    }
    String::from_utf8(buf).expect("utf-8 csv")
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn loss_csv(echo: &ConfigEcho, curve: &[EpisodeLog]) -> String {
    csv_with_echo(echo, &strings(&LOSS_HEADER), |w| {
        for e in curve {
            w.write_record([
                e.episode.to_string(),
                e.loss.meta_ce.to_string(),
                e.loss.entropy_dist.to_string(),
                e.loss.open_bce.to_string(),
                e.loss.total.to_string(),
                e.lr.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct WithEcho<'a, R: Serialize> {
    seed: u64,
    config: &'a ConfigEcho,
    #[serde(flatten)]
    body: R,
}

fn json<R: Serialize>(echo: &ConfigEcho, seed: u64, body: R) -> String {
    let mut s = serde_json::to_string_pretty(&WithEcho {
        seed,
        config: echo,
        body,
    })
    .expect("serialisable report");
    s.push('\n');
    s
}

pub fn metrics_json(echo: &ConfigEcho, seed: u64, report: &AggregateReport) -> String {
    json(echo, seed, report)
}

#[derive(Serialize)]
struct Ablation<'a> {
    full: &'a AggregateReport,
    without_entropy: &'a AggregateReport,
    fpr_reduction: f64,
}

/// Side-by-side metrics of the full loss and the `λ2 = 0` variant.
pub fn ablation_json(
    echo: &ConfigEcho,
    seed: u64,
    full: &AggregateReport,
    without_entropy: &AggregateReport,
) -> String {
    json(
        echo,
        seed,
        Ablation {
            full,
            without_entropy,
            fpr_reduction: without_entropy.fpr - full.fpr,
        },
    )
}

pub fn sweep_csv(echo: &ConfigEcho, reports: &[AggregateReport]) -> String {
    let header = strings(&[
        "threshold",
        "tp",
        "fn",
        "fp",
        "tn",
        "tpr",
        "fpr",
        "precision",
        "recall_macro",
        "closed_accuracy",
    ]);
    csv_with_echo(echo, &header, |w| {
        for r in reports {
            w.write_record([
                r.threshold.to_string(),
                r.tp.to_string(),
                r.fn_.to_string(),
                r.fp.to_string(),
                r.tn.to_string(),
                r.tpr.to_string(),
                r.fpr.to_string(),
                r.precision.to_string(),
                r.recall_macro.to_string(),
                r.closed_accuracy.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Test-split embeddings with the open-class flags and `p_open` of
/// evaluation `index`.
pub fn features_csv(echo: &ConfigEcho, meta: &MetaTest, index: usize) -> String {
    let d = meta.embed_dim();
    let mut header = strings(&["sample_id", "true_class", "is_open", "p_open"]);
    header.extend((0..d).map(|j| format!("e_{j}")));
    let partition = meta.partition(index);
    let scores = meta.scores(index);
    csv_with_echo(echo, &header, |w| {
        for (i, &truth) in meta.truths().iter().enumerate() {
            let mut rec = vec![
                i.to_string(),
                truth.to_string(),
                (!partition.closed.contains(&truth) as u8).to_string(),
                scores.p_open[i].to_string(),
            ];
            rec.extend(meta.test_embedding(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}
