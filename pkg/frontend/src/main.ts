import { SketchPad } from "./app.js";
import { Point } from "./strokes.js";

const canvas = document.querySelector<HTMLCanvasElement>("#pad")!;
const ctx = canvas.getContext("2d")!;
const tauSlider = document.querySelector<HTMLInputElement>("#tau")!;
const tauValue = document.querySelector<HTMLSpanElement>("#tau-value")!;
const modelSelect = document.querySelector<HTMLSelectElement>("#model")!;
const completeBtn = document.querySelector<HTMLButtonElement>("#complete")!;
const regenerateBtn = document.querySelector<HTMLButtonElement>("#regenerate")!;
const clearBtn = document.querySelector<HTMLButtonElement>("#clear")!;
const banner = document.querySelector<HTMLDivElement>("#banner")!;
const scoreLabel = document.querySelector<HTMLSpanElement>("#score")!;

const pad = new SketchPad();

function canvasPoint(e: PointerEvent): Point {
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((e.clientX - rect.left) * canvas.width) / rect.width,
    y: ((e.clientY - rect.top) * canvas.height) / rect.height,
  };
}

function drawPolyline(points: Point[], color: string, width: number): void {
  if (points.length < 2) return;
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.lineCap = "round";
  ctx.lineJoin = "round";
  ctx.beginPath();
  ctx.moveTo(points[0].x, points[0].y);
  for (const p of points.slice(1)) ctx.lineTo(p.x, p.y);
  ctx.stroke();
}

function redraw(): void {
  ctx.fillStyle = "#fffdf7";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  for (const stroke of pad.buffer.strokes) {
    drawPolyline(stroke, "#1c1c1c", 2.5);
  }
  for (const poly of pad.overlayPolylines()) {
    drawPolyline(poly, "#e4572e", 2.5);
  }
  banner.textContent =
    pad.status === "pending"
      ? "completing…"
      : pad.status === "error"
        ? pad.errorMessage
        : "";
  banner.className = pad.status === "error" ? "banner error" : "banner";
  scoreLabel.textContent =
    pad.overlay && pad.status === "done" ? `ske-score ${pad.overlay.skeScore.toFixed(3)}` : "";
  regenerateBtn.disabled = pad.status === "pending" || pad.overlay === null;
  completeBtn.disabled = pad.buffer.isEmpty() || pad.selected === null;
}

pad.onChange = redraw;

canvas.addEventListener("pointerdown", (e) => {
  canvas.setPointerCapture(e.pointerId);
  pad.pointerDown(canvasPoint(e));
});
canvas.addEventListener("pointermove", (e) => pad.pointerMove(canvasPoint(e)));
canvas.addEventListener("pointerup", () => pad.pointerUp());
canvas.addEventListener("pointercancel", () => pad.pointerUp());

tauSlider.addEventListener("input", () => {
  pad.tau = Number(tauSlider.value);
  tauValue.textContent = pad.tau.toFixed(2);
});
modelSelect.addEventListener("change", () => pad.selectModel(modelSelect.value));
completeBtn.addEventListener("click", () => void pad.complete());
regenerateBtn.addEventListener("click", () => void pad.regenerate());
clearBtn.addEventListener("click", () => pad.clear());

pad
  .loadModels()
  .then(() => {
    modelSelect.innerHTML = "";
    for (const m of pad.models) {
      const option = document.createElement("option");
      option.value = m.name;
      option.textContent = `${m.name} (n_max ${m.n_max})`;
      modelSelect.appendChild(option);
    }
    redraw();
  })
  .catch((err) => {
    banner.textContent = `cannot reach the service: ${err}`;
    banner.className = "banner error";
  });

tauSlider.value = String(pad.tau);
tauValue.textContent = pad.tau.toFixed(2);
redraw();
