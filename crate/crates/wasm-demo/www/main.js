import init, { profile_names, granularity_curve, privacy_curves, partition_histogram } from "./pkg/fledgesim_wasm.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"];

function call(fn, out, ...args) {
  try {
    out.classList.remove("err");
    return JSON.parse(fn(...args));
  } catch (e) {
    out.textContent = String(e);
    out.classList.add("err");
    return null;
  }
}

// Draws polylines on a canvas; xs and ys are already in plot coordinates.
function plot(canvas, series, { xlabel, ylabel, logx = false, logy = false, hline = null }) {
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, L = 56, B = 34, T = 10, R = 10;
  ctx.clearRect(0, 0, W, H);
  const tx = (v) => (logx ? Math.log10(v) : v);
  const ty = (v) => (logy ? Math.log10(v) : v);
  const pts = series.flatMap((s) => s.points).filter(([x, y]) => Number.isFinite(tx(x)) && Number.isFinite(ty(y)));
  if (pts.length === 0) return;
  let [x0, x1] = [Math.min(...pts.map((p) => tx(p[0]))), Math.max(...pts.map((p) => tx(p[0])))];
  let [y0, y1] = [Math.min(...pts.map((p) => ty(p[1]))), Math.max(...pts.map((p) => ty(p[1])))];
  if (hline !== null) { y0 = Math.min(y0, ty(hline)); y1 = Math.max(y1, ty(hline)); }
  if (y1 === y0) { y0 -= 1; y1 += 1; }
  const sx = (v) => L + ((tx(v) - x0) / (x1 - x0 || 1)) * (W - L - R);
  const sy = (v) => H - B - ((ty(v) - y0) / (y1 - y0)) * (H - B - T);

  ctx.strokeStyle = "#888";
  ctx.beginPath(); ctx.moveTo(L, T); ctx.lineTo(L, H - B); ctx.lineTo(W - R, H - B); ctx.stroke();
  ctx.fillStyle = "#444"; ctx.font = "11px system-ui";
  const fmt = (v, log) => (log ? "1e" + v.toFixed(0) : v.toPrecision(3));
  ctx.fillText(fmt(x0, logx), L, H - B + 14);
  ctx.fillText(fmt(x1, logx), W - R - 40, H - B + 14);
  ctx.fillText(fmt(y1, logy), 2, T + 10);
  ctx.fillText(fmt(y0, logy), 2, H - B);
  ctx.fillText(xlabel, (W - L) / 2, H - 4);
  ctx.fillText(ylabel, 2, H / 2);

  if (hline !== null) {
    ctx.setLineDash([4, 4]); ctx.strokeStyle = "#aaa";
    ctx.beginPath(); ctx.moveTo(L, sy(hline)); ctx.lineTo(W - R, sy(hline)); ctx.stroke();
    ctx.setLineDash([]);
  }
  series.forEach((s, i) => {
    ctx.strokeStyle = s.color || COLORS[i % COLORS.length];
    ctx.lineWidth = 2;
    ctx.beginPath();
    let pen = false;
    for (const [x, y] of s.points) {
      if (!Number.isFinite(tx(x)) || !Number.isFinite(ty(y))) { pen = false; continue; }
      pen ? ctx.lineTo(sx(x), sy(y)) : ctx.moveTo(sx(x), sy(y));
      pen = true;
    }
    ctx.stroke();
  });
}

function drawGranularity() {
  const out = $("g-out");
  const pts = call(granularity_curve, out, $("g-network").value, $("g-device").value, Number($("g-samples").value));
  if (!pts) return;
  const fit = pts.filter((p) => p.granularity !== null);
  plot($("g-canvas"), [{ points: fit.map((p) => [p.params, p.granularity]) }],
    { xlabel: "parameters", ylabel: "G", logx: true, logy: true, hline: 1 });
  const flip = fit.find((p) => p.granularity < 1);
  const oom = pts.find((p) => p.granularity === null);
  out.textContent =
    (flip ? `Communication dominates from about ${flip.params.toLocaleString()} parameters.` : "Computation dominates across the range.") +
    (oom ? ` The model no longer fits on the device from ${oom.params.toLocaleString()} parameters.` : "");
}

function drawPrivacy() {
  const out = $("p-out");
  const z = Number($("p-z").value);
  const r = call(privacy_curves, out, z, Number($("p-q").value), Number($("p-rounds").value),
    Number($("p-delta").value), 1.0, Number($("p-clients").value));
  if (!r) return;
  plot($("p-eps"), [{ points: r.epsilon.filter(([, e]) => e !== null) }], { xlabel: "noise multiplier z", ylabel: "ε", logy: true });
  plot($("p-noise"), [{ points: r.noise_std, color: COLORS[2] }], { xlabel: "dropout rate p", ylabel: "σ" });
  const here = r.epsilon.reduce((a, b) => (Math.abs(b[0] - z) < Math.abs(a[0] - z) ? b : a));
  out.textContent = `ε ≈ ${here[1] === null ? "∞" : here[1].toFixed(2)} at z = ${here[0].toFixed(2)}; ` +
    `σ rises from ${r.noise_std[0][1].toFixed(3)} to ${r.noise_std.at(-1)[1].toFixed(3)} as clients drop out.`;
}

function drawPartition() {
  const out = $("h-out");
  const alpha = Math.pow(10, Number($("h-alpha").value));
  $("h-alpha-val").textContent = alpha.toPrecision(3);
  const r = call(partition_histogram, out, Number($("h-clients").value), alpha, Number($("h-seed").value));
  if (!r) return;
  const canvas = $("h-canvas");
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, B = 20;
  ctx.clearRect(0, 0, W, H);
  const totals = r.histograms.map((h) => h.reduce((a, b) => a + b, 0));
  const max = Math.max(...totals);
  const bw = W / r.histograms.length;
  r.histograms.forEach((h, i) => {
    let y = H - B;
    h.forEach((count, c) => {
      const hgt = (count / max) * (H - B - 8);
      ctx.fillStyle = COLORS[c % COLORS.length];
      ctx.fillRect(i * bw + 1, y - hgt, bw - 2, hgt);
      y -= hgt;
    });
  });
  ctx.fillStyle = "#444"; ctx.font = "11px system-ui";
  ctx.fillText("clients (stacked bars are class counts)", 4, H - 4);
  out.textContent = `Client sizes range from ${Math.min(...totals)} to ${max} samples.`;
}

async function main() {
  await init();
  const names = JSON.parse(profile_names());
  for (const [sel, list, pick] of [[$("g-network"), names.networks, "lte-global-avg"], [$("g-device"), names.devices, "orin"]]) {
    for (const n of list) sel.add(new Option(n, n, false, n === pick));
  }
  for (const id of ["g-network", "g-device", "g-samples"]) $(id).addEventListener("input", drawGranularity);
  for (const id of ["p-z", "p-q", "p-rounds", "p-delta", "p-clients"]) $(id).addEventListener("input", drawPrivacy);
  for (const id of ["h-clients", "h-alpha", "h-seed"]) $(id).addEventListener("input", drawPartition);
  drawGranularity();
  drawPrivacy();
  drawPartition();
}

main();
