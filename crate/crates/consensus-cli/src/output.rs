//! File outputs: trace.csv, events.csv, summary.json, optional plot script.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so files
//! round-trip to the exact binary values. Agent columns are 1-based to
//! match the `x_1 .. x_N` header names.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use consensus_core::engine::{SimulationTrace, Variant};

use crate::report::SummaryDoc;

/// Writes all artifacts of one run into `dir` (created if missing).
/// trace.csv is decimated; events.csv always carries every event.
pub fn write_outputs(
    dir: &Path,
    doc: &SummaryDoc,
    trace: &SimulationTrace,
    decimation: usize,
    gnuplot: bool,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut decimated = trace.clone();
    decimated.decimate(decimation);
    fs::write(dir.join("trace.csv"), trace_csv(&decimated))?;
    fs::write(dir.join("events.csv"), events_csv(trace))?;
    fs::write(dir.join("summary.json"), summary_json(doc)?)?;
    if gnuplot {
        fs::write(dir.join("plot.gp"), gnuplot_script(trace.agent_count()))?;
    }
    Ok(())
}

pub fn summary_json(doc: &SummaryDoc) -> io::Result<String> {
    let mut s = serde_json::to_string_pretty(doc).map_err(io::Error::other)?;
    s.push('\n');
    Ok(s)
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("string write");
}

/// Column layout per variant: time, states, holder outputs, then the
/// variant's extra channels in the order d, y, w, e.
fn channels(trace: &SimulationTrace) -> Vec<(&'static str, &Vec<Vec<f64>>)> {
    let mut cols: Vec<(&'static str, &Vec<Vec<f64>>)> =
        vec![("x", &trace.x), ("est", &trace.estimates)];
    match trace.variant {
        Variant::Nominal => {}
        Variant::Additive => {
            cols.push(("d", trace.d.as_ref().expect("additive trace has d")));
            cols.push(("y", trace.y.as_ref().expect("additive trace has y")));
            cols.push(("e", &trace.sampling_error));
        }
        Variant::Topology => cols.push(("e", &trace.sampling_error)),
        Variant::Dac => {
            cols.push(("d", trace.d.as_ref().expect("dac trace has d")));
            cols.push(("y", trace.y.as_ref().expect("dac trace has y")));
            cols.push(("w", trace.w.as_ref().expect("dac trace has w")));
            cols.push(("e", &trace.sampling_error));
        }
    }
    cols
}

pub fn trace_csv(trace: &SimulationTrace) -> String {
    let n = trace.agent_count();
    let cols = channels(trace);
    let mut out = String::from("t");
    for (prefix, _) in &cols {
        for i in 1..=n {
            write!(out, ",{prefix}_{i}").expect("string write");
        }
    }
    out.push('\n');
    for (k, &t) in trace.times.iter().enumerate() {
        num(&mut out, t);
        for (_, series) in &cols {
            for v in &series[k] {
                out.push(',');
                num(&mut out, *v);
            }
        }
        out.push('\n');
    }
    out
}

pub fn events_csv(trace: &SimulationTrace) -> String {
    let mut events = trace.events.clone();
    events.sort_by(|a, b| {
        a.time
            .partial_cmp(&b.time)
            .expect("event times are finite")
            .then(a.agent.cmp(&b.agent))
    });
    let mut out = String::from("agent,time,f_value\n");
    for ev in &events {
        write!(out, "{}", ev.agent + 1).expect("string write");
        out.push(',');
        num(&mut out, ev.time);
        out.push(',');
        num(&mut out, ev.f_value_at_trigger);
        out.push('\n');
    }
    out
}

/// Two-pane plot: state trajectories on top, trigger raster below.
pub fn gnuplot_script(n: usize) -> String {
    format!(
        "set datafile separator ','\n\
         set multiplot layout 2,1\n\
         set xlabel 't'\n\
         set ylabel 'x_i'\n\
         plot for [i=2:{top}] 'trace.csv' using 1:i with lines title columnhead\n\
         set ylabel 'agent'\n\
         set yrange [0.5:{ymax}.5]\n\
         plot 'events.csv' every ::1 using 2:1 with points pt 7 ps 0.4 notitle\n\
         unset multiplot\n",
        top = n + 1,
        ymax = n
    )
}
