import init, { collapse_scores, attention_sweep, perturb_table } from "./pkg/patchprobe_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (v) => (v === null || v === undefined ? "n/a" : v.toFixed(4));

function showError(el, e) {
  el.innerHTML = `<p class="err">${e.message ?? e}</p>`;
}

function renderCollapse() {
  const out = $("c-out");
  try {
    const r = JSON.parse(collapse_scores(num("c-n"), num("c-d"), num("c-changes"), num("c-angle"), num("c-jitter"), num("c-seed")));
    const exp = r.expected;
    const closed = { mean: exp.mean, max: exp.max, maxsim: exp.maxsim_a_to_b, meanpatch: exp.meanpatch, minpatch: exp.minpatch };
    const rows = r.mechanisms.map((s) => `<tr><td>${s.label}</td><td>${fmt(s.value)}</td><td>${fmt(closed[s.key])}</td></tr>`);
    const mit = r.mitigations.map((s) => `<tr><td>${s.label}</td><td>${fmt(s.value)}</td><td></td></tr>`);
    out.innerHTML = `<table class="scores"><tr><th>score</th><th>computed</th><th>closed form</th></tr>${rows.join("")}${mit.join("")}</table>`;
  } catch (e) {
    showError(out, e);
  }
}

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
const NAMES = ["Mean", "Max", "MaxSim", "MeanP", "MinP"];

function renderSweep() {
  const canvas = $("a-plot");
  const ctx = canvas.getContext("2d");
  let pts;
  try {
    pts = JSON.parse(attention_sweep(num("a-n"), 41));
  } catch (e) {
    showError($("a-legend"), e);
    return;
  }
  const { width: w, height: h } = canvas;
  const pad = 30;
  const x = (p) => pad + p * (w - 2 * pad);
  const y = (g) => h / 2 - g * (h / 2 - pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, y(0));
  ctx.lineTo(w - pad, y(0));
  ctx.moveTo(pad, y(1));
  ctx.lineTo(pad, y(-1));
  ctx.stroke();
  ctx.fillStyle = "#555";
  ctx.fillText("+1", 4, y(1) + 4);
  ctx.fillText("-1", 4, y(-1) + 4);
  ctx.fillText("layout fraction 0 .. 1", w / 2 - 50, h - 6);
  NAMES.forEach((_, m) => {
    ctx.strokeStyle = COLORS[m];
    ctx.beginPath();
    pts.forEach((pt, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, x(pt.layout_fraction), y(pt.gaps[m])));
    ctx.stroke();
  });
  $("a-legend").innerHTML = NAMES.map((n, m) => `<span style="color:${COLORS[m]}">&#9632; ${n}</span>`).join(" &nbsp; ");
}

function paint(canvas, rgba, w, h) {
  canvas.width = w;
  canvas.height = h;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
}

function renderTable() {
  const out = $("t-out");
  try {
    const r = perturb_table($("t-cells").value, num("t-row"), num("t-col"), $("t-text").value, $("t-mode").value);
    paint($("t-orig"), r.original(), r.width, r.height);
    paint($("t-edit"), r.edited(), r.width, r.height);
    const [bx, by, bw, bh] = r.bbox;
    out.textContent = `${r.changed_pixels} pixels changed, all inside [${bx}, ${by}, ${bw}, ${bh}] of a ${r.width}x${r.height} page`;
    r.free();
  } catch (e) {
    showError(out, e);
  }
}

await init();
for (const id of ["c-n", "c-d", "c-changes", "c-angle", "c-jitter", "c-seed"]) $(id).addEventListener("input", renderCollapse);
$("a-n").addEventListener("input", renderSweep);
for (const id of ["t-cells", "t-row", "t-col", "t-text", "t-mode"]) $(id).addEventListener("input", renderTable);
renderCollapse();
renderSweep();
renderTable();
