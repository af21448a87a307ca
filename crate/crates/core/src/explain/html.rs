use std::fmt::Write;

use super::ExplanationRecord;
use crate::graphdata::{PropagationEvent, Vocabulary};

const BLUE: (u8, u8, u8) = (37, 99, 235);
const GREEN: (u8, u8, u8) = (22, 163, 74);
const RED: (u8, u8, u8) = (220, 38, 38);

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn shade((r, g, b): (u8, u8, u8), intensity: f64) -> String {
    format!(
        "background:rgba({r},{g},{b},{:.3})",
        intensity.clamp(0.0, 1.0)
    )
}

fn depth(event: &PropagationEvent, mut v: usize) -> usize {
    let mut d = 0;
    while let Some(p) = event.parent(v) {
        v = p;
        d += 1;
    }
    d
}

/// Static, script-free HTML view of one explanation.
///
/// Token colours: blue for kept tokens positive only for the explained
/// class, green for kept tokens also positive for another class, red for
/// tokens with non-positive relevance. Positive tokens that lost the
/// contrast stay unshaded. Opacity is `|z|` over the event's largest `|z|`.
/// Node-level methods shade whole posts instead.
pub fn render_html(
    record: &ExplanationRecord,
    event: &PropagationEvent,
    vocabulary: Option<&Vocabulary>,
) -> String {
    let mut html = String::new();
    let title = format!(
        "{} explanation for event {}",
        record.method, record.event_id
    );
    let _ = writeln!(html, "<!DOCTYPE html>");
    let _ = writeln!(
        html,
        "<html><head><meta charset=\"utf-8\"><title>{}</title></head>",
        escape(&title)
    );
    let _ = writeln!(
        html,
        "<body style=\"font-family:sans-serif;line-height:1.8;margin:2em\">"
    );
    let _ = writeln!(
        html,
        "<h1 style=\"font-size:1.2em\">{}</h1>",
        escape(&title)
    );
    let logits: Vec<String> = record.logits.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(
        html,
        "<p>predicted class {} &middot; explained class {} &middot; logits [{}]{}</p>",
        record.predicted,
        record.target,
        logits.join(", "),
        if record.low_confidence {
            " &middot; <strong>low confidence</strong>"
        } else {
            ""
        }
    );

    let z_target = |t: &super::TokenRecord| t.z.get(&record.target).copied().unwrap_or(0.0);
    let scale = record
        .tokens
        .iter()
        .map(|t| z_target(t).abs())
        .chain(record.node_scores.iter().flatten().map(|s| s.abs()))
        .fold(0.0f64, f64::max);
    let intensity = |x: f64| if scale > 0.0 { x.abs() / scale } else { 0.0 };

    for v in 0..event.num_nodes() {
        let post = &event.posts()[v];
        let mut style = format!(
            "margin:0.3em 0 0.3em {}em;padding:0.2em 0.5em;border-left:2px solid #ccc",
            1.5 * depth(event, v) as f64
        );
        if let Some(scores) = &record.node_scores {
            let s = scores[v];
            let colour = if s > 0.0 { BLUE } else { RED };
            let _ = write!(style, ";{}", shade(colour, intensity(s)));
        }
        let _ = write!(
            html,
            "<div style=\"{style}\"><span style=\"color:#666;font-size:0.8em\">{}</span> ",
            escape(&post.post_id)
        );
        for t in record.tokens.iter().filter(|t| t.node == v) {
            let z = z_target(t);
            let text = t.text.clone().unwrap_or_else(|| format!("#{}", t.token));
            let contested = t.z.iter().any(|(&c, &zc)| c != record.target && zc > 0.0);
            let span_style = if z <= 0.0 {
                shade(RED, intensity(z))
            } else if t.kept && contested {
                shade(GREEN, intensity(z))
            } else if t.kept {
                shade(BLUE, intensity(z))
            } else {
                "background:none".to_owned()
            };
            let _ = write!(
                html,
                "<span style=\"{span_style};padding:0 0.15em\" title=\"z={z:.6}\">{}</span> ",
                escape(&text)
            );
        }
        if record.tokens.is_empty() {
            let words: Vec<String> = event
                .tokens(v)
                .iter()
                .map(|&tok| match vocabulary.and_then(|voc| voc.token(tok)) {
                    Some(w) => escape(w),
                    None => format!("#{tok}"),
                })
                .collect();
            let _ = write!(html, "{} ", words.join(" "));
        }
        if let Some(scores) = &record.node_scores {
            let _ = write!(
                html,
                "<span style=\"color:#666;font-size:0.8em\">score {:.4}</span>",
                scores[v]
            );
        }
        let _ = writeln!(html, "</div>");
    }
    let _ = writeln!(html, "</body></html>");
    html
}
