import init, {
  simulateWalk,
  dualSkeleton,
  graphPartitions,
  viewLabels,
  conditionLabels,
} from "./pkg/skelgait_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const fmt = (x, d = 1) => (x === null || x === undefined ? "-" : x.toFixed(d));

function showError(e) {
  $("error").textContent = e ? String(e.message || e) : "";
}

function fillSelect(sel, labels, value) {
  for (const l of labels) sel.add(new Option(l, l, false, l === value));
}

function table(el, header, rows) {
  el.innerHTML = "";
  const tr = el.insertRow();
  for (const h of header) tr.appendChild(Object.assign(document.createElement("th"), { textContent: h }));
  for (const r of rows) {
    const row = el.insertRow();
    for (const c of r) row.insertCell().textContent = c;
  }
}

// Front view from the master camera: x to the right, y down.
function fitView(frames, canvas) {
  let [x0, x1, y0, y1] = [Infinity, -Infinity, Infinity, -Infinity];
  for (const f of frames) {
    for (const [x, y] of f.truth) {
      x0 = Math.min(x0, x); x1 = Math.max(x1, x);
      y0 = Math.min(y0, y); y1 = Math.max(y1, y);
    }
  }
  const pad = 40;
  const s = Math.min((canvas.width - 2 * pad) / (x1 - x0 || 1), (canvas.height - 2 * pad) / (y1 - y0 || 1));
  const ox = (canvas.width - s * (x1 - x0)) / 2;
  const oy = (canvas.height - s * (y1 - y0)) / 2;
  return ([x, y]) => [ox + s * (x - x0), oy + s * (y - y0)];
}

function drawSkeleton(ctx, proj, joints, bones, color, width) {
  ctx.strokeStyle = color;
  ctx.fillStyle = color;
  ctx.lineWidth = width;
  for (const [a, b] of bones) {
    if (!joints[a] || !joints[b]) continue;
    const [ax, ay] = proj(joints[a]);
    const [bx, by] = proj(joints[b]);
    ctx.beginPath(); ctx.moveTo(ax, ay); ctx.lineTo(bx, by); ctx.stroke();
  }
  for (const j of joints) {
    if (!j) continue;
    const [x, y] = proj(j);
    ctx.beginPath(); ctx.arc(x, y, width + 1, 0, 2 * Math.PI); ctx.fill();
  }
}

let walk = null;
let proj = null;

function drawWalk() {
  if (!walk) return;
  const canvas = $("walk-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const k = Number($("walk-frame").value);
  const f = walk.frames[k];
  ctx.globalAlpha = 0.3;
  for (let i = 0; i < walk.frames.length; i += 5) {
    const p = proj(walk.frames[i].truth[0]);
    ctx.fillStyle = "#999"; ctx.fillRect(p[0] - 1, p[1] - 1, 2, 2);
  }
  ctx.globalAlpha = 1;
  drawSkeleton(ctx, proj, f.truth, walk.bones, "#999", 3);
  const d = Number($("walk-device").value);
  if (d >= 0) drawSkeleton(ctx, proj, f.devices[d], walk.bones, "#39c", 1);
  drawSkeleton(ctx, proj, f.fused, walk.bones, "#d33", 1.5);
  ctx.fillStyle = "#222";
  ctx.fillText(`frame ${k}  fused error ${fmt(f.fused_error)} mm`, 10, 16);
}

function runWalk() {
  showError(null);
  try {
    walk = JSON.parse(simulateWalk(
      Number($("walk-seed").value), $("walk-view").value, $("walk-cond").value, Number($("walk-frames").value)));
  } catch (e) {
    showError(e);
    return;
  }
  proj = fitView(walk.frames, $("walk-canvas"));
  const slider = $("walk-frame");
  slider.max = walk.frames.length - 1;
  slider.value = Math.min(Number(slider.value), walk.frames.length - 1);
  const dev = $("walk-device");
  dev.length = 1;
  walk.device_names.forEach((n, i) => dev.add(new Option(n, i)));
  const rows = walk.device_names.map((n, i) => [n, fmt(walk.mean_device_error[i]), fmt(100 * walk.device_coverage[i])]);
  rows.push(["fused", fmt(walk.mean_fused_error), fmt(100 * walk.fused_coverage)]);
  table($("walk-table"), ["source", "mean error (mm)", "coverage (%)"], rows);
  drawWalk();
}

function runDual() {
  showError(null);
  let d;
  try {
    d = JSON.parse(dualSkeleton(Number($("dual-seed").value), Number($("dual-heading").value), Number($("dual-t").value)));
  } catch (e) {
    showError(e);
    return;
  }
  table($("dual-summary"), ["feature", "value"], [
    ["height (mm)", fmt(d.height)],
    ["shoulder breadth (mm)", fmt(d.shoulder_breadth)],
    ["shoulder/hip ratio", fmt(d.shoulder_hip_ratio, 3)],
  ]);
  table($("dual-table"), ["joint", "x", "y", "z", "pseudo x", "pseudo y", "pseudo z", "bone (mm)"],
    d.joint_names.map((n, i) => [
      n, ...d.real[i].map((v) => fmt(v)), ...d.pseudo[i].map((v) => fmt(v, i === 0 ? 3 : 1)),
      i === 0 ? "-" : fmt(d.bone_lengths[i]),
    ]));
}

let graph = null;

function drawGraph() {
  const k = Number($("graph-part").value);
  const m = graph.partitions[k];
  const v = graph.joint_names.length;
  const canvas = $("graph-canvas");
  const ctx = canvas.getContext("2d");
  const cell = (canvas.width - 20) / v;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const max = Math.max(...m) || 1;
  for (let i = 0; i < v; i++) {
    for (let j = 0; j < v; j++) {
      const a = m[i * v + j] / max;
      ctx.fillStyle = a > 0 ? `rgba(200, 40, 40, ${0.15 + 0.85 * a})` : "#fff";
      ctx.fillRect(20 + j * cell, 20 + i * cell, cell - 1, cell - 1);
    }
    ctx.fillStyle = "#222";
    ctx.fillText(String(i), 2, 20 + (i + 0.7) * cell);
    ctx.fillText(String(i), 20 + (i + 0.2) * cell, 14);
  }
}

async function main() {
  await init();
  fillSelect($("walk-view"), JSON.parse(viewLabels()), "T45");
  fillSelect($("walk-cond"), JSON.parse(conditionLabels()), "LCL");
  $("walk-run").onclick = runWalk;
  $("walk-frame").oninput = drawWalk;
  $("walk-device").onchange = drawWalk;
  $("dual-run").onclick = runDual;

  graph = JSON.parse(graphPartitions());
  graph.partition_names.forEach((n, i) => $("graph-part").add(new Option(n, i)));
  $("graph-part").onchange = drawGraph;
  table($("graph-hops"), ["#", "joint", "hops to center"], graph.joint_names.map((n, i) => [i, n, graph.hops[i]]));
  drawGraph();

  runWalk();
  runDual();
}

main().catch(showError);
