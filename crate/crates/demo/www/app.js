import init, { dataset_samples, DemoSession } from "./pkg/layoutvae_demo.js";

let session = null;
let training = false;

const $ = (id) => document.getElementById(id);
const showError = (e) => { $("error").textContent = e ? String(e) : ""; };

function card(svg, caption) {
  const fig = document.createElement("figure");
  fig.className = "card";
  fig.innerHTML = svg;
  if (caption) {
    const cap = document.createElement("figcaption");
    cap.textContent = caption;
    fig.appendChild(cap);
  }
  return fig;
}

function describe(doc) {
  const counts = Object.entries(doc.counts).map(([k, v]) => `${k}×${v}`).join(", ");
  return `counts: ${counts}`;
}

function showDataset() {
  showError();
  try {
    const seed = Number($("data-seed").value) >>> 0;
    const items = JSON.parse(dataset_samples(seed, 8));
    const gallery = $("data-gallery");
    gallery.replaceChildren();
    for (const item of items) gallery.appendChild(card(item.svg, describe(item.doc)));
  } catch (e) { showError(e); }
}

async function trainLoop(totalSteps) {
  const lr = Number($("train-lr").value) || 1e-3;
  const chunk = 5;
  let done = 0;
  training = true;
  $("train-btn").disabled = true;
  $("train-more").disabled = true;
  while (done < totalSteps && training) {
    const stats = JSON.parse(session.train_steps(Math.min(chunk, totalSteps - done), lr));
    done += chunk;
    $("train-progress").value = Math.min(done / totalSteps, 1);
    $("train-status").innerHTML =
      `step ${stats.count_steps} · count loss <span class="loss">${stats.count_loss.toFixed(3)}</span>` +
      ` · box loss <span class="loss">${stats.bbox_loss.toFixed(2)}</span>`;
    await new Promise((r) => setTimeout(r, 0)); // let the page breathe
  }
  training = false;
  $("train-btn").disabled = false;
  $("train-more").disabled = false;
  $("sample-btn").disabled = false;
  $("flip-btn").disabled = false;
}

function createSession() {
  showError();
  try {
    const seed = Number($("data-seed").value) >>> 0;
    session = new DemoSession(
      seed,
      Number($("train-images").value) >>> 0,
      Number($("train-hidden").value) >>> 0,
      Number($("train-latent").value) >>> 0,
    );
    trainLoop(Number($("train-steps").value) >>> 0).catch(showError);
  } catch (e) { showError(e); }
}

function sampleLayouts() {
  showError();
  try {
    const labels = [...document.querySelectorAll(".lbl:checked")].map((c) => c.value).join(",");
    if (!labels) { showError("pick at least one label"); return; }
    const base = Number($("sample-seed").value) >>> 0;
    const gallery = $("sample-gallery");
    gallery.replaceChildren();
    for (let i = 0; i < 4; i++) {
      const out = JSON.parse(session.sample(labels, base + i));
      gallery.appendChild(card(out.svg, describe(out.doc)));
    }
  } catch (e) { showError(e); }
}

function scoreFlip() {
  showError();
  try {
    const out = JSON.parse(session.score_flip(
      Number($("flip-index").value) >>> 0,
      Number($("flip-samples").value) >>> 0,
    ));
    const box = $("flip-result");
    box.replaceChildren();
    const orig = card(out.svg_original, `original · NLL/box ${out.nll_original.toFixed(2)}`);
    const flip = card(out.svg_flipped, `flipped · NLL/box ${out.nll_flipped.toFixed(2)}`);
    orig.prepend(Object.assign(document.createElement("b"), { textContent: "original" }));
    flip.prepend(Object.assign(document.createElement("b"), {
      textContent: out.nll_flipped > out.nll_original ? "flipped (less likely)" : "flipped",
    }));
    box.append(orig, flip);
  } catch (e) { showError(e); }
}

init().then(() => {
  $("data-btn").onclick = showDataset;
  $("train-btn").onclick = createSession;
  $("train-more").onclick = () => trainLoop(Number($("train-steps").value) >>> 0).catch(showError);
  $("sample-btn").onclick = sampleLayouts;
  $("flip-btn").onclick = scoreFlip;
  showDataset();
}).catch(showError);
