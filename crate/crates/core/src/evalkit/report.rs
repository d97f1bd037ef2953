//! Evaluation report files: JSON summaries, CSV rows and SVG charts.

use std::fmt::Write as _;

use super::analysis::{IouTrend, SampleMetrics};

/// CSV of per-sample metrics with a fixed column order and `{:.9}` floats.
pub fn samples_csv(samples: &[SampleMetrics]) -> String {
    let mut s = String::from("target_id,bbox_iou,degradation,l1,psnr,ssim,lpips\n");
    for m in samples {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            m.target_id, m.bbox_iou, m.degradation, m.l1, m.psnr, m.ssim, m.lpips
        );
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bar chart of mean improvement per IoU bin with ±1 SE whiskers.
pub fn trend_svg(trend: &IouTrend, title: &str) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for b in &trend.bins {
        lo = lo.min(b.mean_improvement - b.bootstrap_se);
        hi = hi.max(b.mean_improvement + b.bootstrap_se);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let y = |v: f64| top + ph * (hi - v) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(s, r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, y(0.0), left + pw, y(0.0));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.2}" stroke="black"/>"#, top + ph);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-family="sans-serif" font-size="11" transform="rotate(-90 14 {:.2})" text-anchor="middle">improvement ({})</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        trend.metric.name()
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">skeleton bbox IoU</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    for v in [lo, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.4}</text>"#,
            left - 4.0,
            y(v) + 4.0
        );
    }
    for b in &trend.bins {
        let x0 = left + pw * b.lo + 4.0;
        let bw = pw * (b.hi - b.lo) - 8.0;
        let (y0, y1) = (y(b.mean_improvement.max(0.0)), y(b.mean_improvement.min(0.0)));
        let fill = if b.mean_improvement >= 0.0 { "#4a7ab5" } else { "#c0504d" };
        let _ =
            writeln!(s, r#"<rect x="{x0:.2}" y="{y0:.2}" width="{bw:.2}" height="{:.2}" fill="{fill}"/>"#, (y1 - y0).max(0.5));
        let cx = x0 + bw / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            y(b.mean_improvement - b.bootstrap_se),
            y(b.mean_improvement + b.bootstrap_se)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{:.1}-{:.1} (n={})</text>"#,
            top + ph + 14.0,
            b.lo,
            b.hi,
            b.count
        );
    }
    s.push_str("</svg>\n");
    s
}
