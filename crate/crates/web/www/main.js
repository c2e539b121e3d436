import init, { mask_pattern, plt_curve, generation_schedule } from "./pkg/dmtd_web.js";

const num = (form, name) => Number(form.elements[name].value);

function guarded(errorId, fn) {
  const err = document.getElementById(errorId);
  try {
    err.textContent = "";
    fn();
  } catch (e) {
    err.textContent = String(e.message ?? e);
  }
}

function drawMask() {
  const f = document.getElementById("mask-form");
  guarded("mask-error", () => {
    const bits = mask_pattern(num(f, "n"), num(f, "tau"), num(f, "anchor"));
    const out = document.getElementById("mask");
    out.replaceChildren(...Array.from(bits, (b, i) => {
      const c = document.createElement("div");
      c.className = b ? "cell on" : "cell";
      c.textContent = i;
      return c;
    }));
  });
}

function drawPlt() {
  const f = document.getElementById("plt-form");
  guarded("plt-error", () => {
    const pts = JSON.parse(plt_curve(num(f, "e"), num(f, "t"), num(f, "d"), f.elements.variant.value, 8));
    const rows = pts.map((p) =>
      `<tr><td>${p.tau}</td><td>${p.fraction}</td><td>${p.plt.toFixed(4)}</td>` +
      `<td>${p.speedup.toFixed(2)}&times;</td>` +
      `<td style="width:12rem;text-align:left"><div class="bar" style="width:${(p.plt * 100).toFixed(1)}%"></div></td></tr>`);
    document.getElementById("plt").innerHTML =
      "<tr><th>&tau;</th><th>PLT</th><th></th><th>1/PLT</th><th></th></tr>" + rows.join("");
  });
}

function drawSchedule() {
  const f = document.getElementById("sched-form");
  guarded("sched-error", () => {
    const v = JSON.parse(generation_schedule(
      num(f, "e"), num(f, "t"), num(f, "d"), f.elements.variant.value,
      num(f, "tau"), num(f, "ctx"), num(f, "gen"), 0));
    const names = ["enc", "think", "dec"];
    const out = document.getElementById("sched");
    out.replaceChildren(...v.passes.map((p, i) => {
      const div = document.createElement("div");
      div.className = "pass";
      const ran = p.stages
        .map((pos, s) => (pos.length ? `${names[s]} [${pos.join(",")}]` : null))
        .filter(Boolean)
        .join("  ");
      const grid = [...p.occupancy].reverse().join("\n");
      div.innerHTML = `<strong>pass ${i + 1}: ${p.kind}</strong> &rarr; token ${p.token}<br><code>${ran}</code><pre></pre>`;
      div.querySelector("pre").textContent = grid;
      return div;
    }));
    const summary = document.createElement("p");
    summary.textContent = `measured PLT ${v.measured_plt}, formula ${v.theoretical_plt}`;
    out.append(summary);
  });
}

await init();
for (const [id, draw] of [["mask-form", drawMask], ["plt-form", drawPlt], ["sched-form", drawSchedule]]) {
  document.getElementById(id).addEventListener("input", draw);
  draw();
}
