// Browser entry point: wires the studio controller to the DOM.

import { ApiClient } from "./api.js";
import { drawLossChart } from "./chart.js";
import { COLOR_WORDS, ETA_STOPS, StudioController } from "./controller.js";

const params = new URLSearchParams(location.search);
const API_BASE = params.get("api") ?? "http://127.0.0.1:8008";

const api = new ApiClient(API_BASE);
const studio = new StudioController(api);

const root = document.getElementById("app")!;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function show(section: HTMLElement): void {
  for (const child of Array.from(root.children)) child.classList.add("hidden");
  section.classList.remove("hidden");
}

function setImage(img: HTMLImageElement, blob: Blob): void {
  const old = img.dataset.objectUrl;
  img.src = URL.createObjectURL(blob);
  img.dataset.objectUrl = img.src;
  if (old) URL.revokeObjectURL(old);
}

// ---- upload view ------------------------------------------------------------

const fileInput = el("input", { type: "file", accept: "image/png" });
const promptInput = el("textarea", {
  rows: "2",
  placeholder: "Context prompt describing the image content…",
});
const negativeList = el("div", { class: "chips" });
const negativeInput = el("input", {
  type: "text",
  placeholder: "Add anti-color prompt…",
});
const startButton = el("button", { class: "primary" }, "Colorize");
const uploadError = el("p", { class: "error" });

function renderNegatives(): void {
  negativeList.replaceChildren(
    ...studio.negatives.map((n) => {
      const remove = el("button", { class: "chip-x", title: "remove" }, "×");
      remove.onclick = () => {
        studio.removeNegative(n);
        renderNegatives();
      };
      return el("span", { class: "chip" }, n, remove);
    }),
  );
}
renderNegatives();
negativeInput.onkeydown = (ev) => {
  if (ev.key === "Enter") {
    studio.addNegative(negativeInput.value);
    negativeInput.value = "";
    renderNegatives();
  }
};

const uploadView = el(
  "section",
  { class: "view" },
  el("h2", {}, "1 · Upload & colorize"),
  el("label", {}, "Grayscale PNG", fileInput),
  el("label", {}, "Context prompt", promptInput),
  el("label", {}, "Anti-color prompts", negativeList, negativeInput),
  startButton,
  uploadError,
);

// ---- training view -----------------------------------------------------------

const progressBar = el("progress", { max: "1", value: "0" }) as HTMLProgressElement;
const lossCanvas = el("canvas", { width: "640", height: "220" }) as HTMLCanvasElement;
const trainingView = el(
  "section",
  { class: "view hidden" },
  el("h2", {}, "Fine-tuning on your image"),
  progressBar,
  lossCanvas,
  el("p", { class: "hint" }, "combined / denoising / contrastive loss, live"),
);

// ---- tagging view -------------------------------------------------------------

const wordRow = el("div", { class: "words" });
const previewLine = el("code", { class: "preview" });
const buildButton = el("button", { class: "primary" }, "Build edit session");
const taggingImages = el("div", { class: "row" });
const taggingView = el(
  "section",
  { class: "view hidden" },
  el("h2", {}, "2 · Tag object words"),
  el("p", { class: "hint" }, "Click the words to bind; adjacent words merge into one object."),
  wordRow,
  el("p", {}, "Rewritten prompt: ", previewLine),
  taggingImages,
  buildButton,
);

async function refreshTagging(): Promise<void> {
  wordRow.replaceChildren(
    ...studio.tokens.map((token) => {
      const button = el(
        "button",
        { class: studio.selectedWords.has(token.index) ? "word active" : "word" },
        token.word,
      );
      button.onclick = async () => {
        studio.toggleWord(token.index);
        await refreshTagging();
      };
      return button;
    }),
  );
  previewLine.textContent = await studio.refreshPreview();
}

// ---- edit view ------------------------------------------------------------------

const grayImg = el("img", { class: "pane", alt: "gray input" }) as HTMLImageElement;
const primaryImg = el("img", { class: "pane", alt: "primary colorization" }) as HTMLImageElement;
const editedImg = el("img", { class: "pane", alt: "edited" }) as HTMLImageElement;
const colorPickers = el("div", { class: "pickers" });
const etaSlider = el("input", {
  type: "range",
  min: "0",
  max: String(ETA_STOPS.length - 1),
  step: "1",
}) as HTMLInputElement;
const etaLabel = el("span", { class: "eta" });
const variantsButton = el("button", {}, "Generate 8 variants");
const gallery = el("div", { class: "gallery" });
const editError = el("p", { class: "error" });

const editView = el(
  "section",
  { class: "view hidden" },
  el("h2", {}, "3 · In-context color editing"),
  colorPickers,
  el(
    "div",
    { class: "slider-row" },
    el("span", {}, "η"),
    etaSlider,
    etaLabel,
    el("span", { class: "hint" }, "(0 = reconstruction)"),
  ),
  el(
    "div",
    { class: "row" },
    el("figure", {}, grayImg, el("figcaption", {}, "input")),
    el("figure", {}, primaryImg, el("figcaption", {}, "primary")),
    el("figure", {}, editedImg, el("figcaption", {}, "edited")),
  ),
  variantsButton,
  gallery,
  editError,
);

function renderPickers(): void {
  colorPickers.replaceChildren(
    ...studio.objectWords.map((word) => {
      const select = el("select", {}) as HTMLSelectElement;
      select.append(el("option", { value: "" }, "(no color)"));
      for (const color of COLOR_WORDS) {
        const option = el("option", { value: color }, color) as HTMLOptionElement;
        if (studio.assignments[word] === color) option.selected = true;
        select.append(option);
      }
      select.onchange = () => {
        studio.setColor(word, select.value || null);
        void refreshEdited();
      };
      return el("label", { class: "picker" }, word + " ", select);
    }),
  );
}

async function refreshEdited(): Promise<void> {
  editError.textContent = "";
  etaLabel.textContent = studio.eta.toFixed(3);
  try {
    const blob = await studio.renderCurrent();
    if (blob) setImage(editedImg, blob);
  } catch (err) {
    editError.textContent = String(err);
  }
}

etaSlider.onchange = () => {
  studio.etaIndex = Number(etaSlider.value);
  void refreshEdited();
};
etaSlider.oninput = () => {
  etaLabel.textContent = ETA_STOPS[Number(etaSlider.value)].toFixed(3);
};

variantsButton.onclick = async () => {
  variantsButton.setAttribute("disabled", "true");
  try {
    const variants = await studio.makeVariants(8);
    gallery.replaceChildren(
      ...variants.map((v) =>
        el(
          "figure",
          { class: "thumb" },
          el("img", { src: API_BASE + v.url, alt: `eta ${v.eta}` }),
          el("figcaption", {}, `η=${v.eta.toFixed(3)}`),
        ),
      ),
    );
  } catch (err) {
    editError.textContent = String(err);
  } finally {
    variantsButton.removeAttribute("disabled");
  }
};

// ---- flow wiring -------------------------------------------------------------------

startButton.onclick = async () => {
  uploadError.textContent = "";
  const file = fileInput.files?.[0];
  if (!file || !promptInput.value.trim()) {
    uploadError.textContent = "Pick a grayscale PNG and write a context prompt first.";
    return;
  }
  show(trainingView);
  try {
    await studio.startColorize(file, promptInput.value.trim(), undefined, () => {
      progressBar.value = studio.jobProgress;
      drawLossChart(lossCanvas, studio.lossPoints);
    });
    taggingImages.replaceChildren(
      el("figure", {}, el("img", { src: api.artifactUrl(studio.grayRef!) }), el("figcaption", {}, "input")),
      el("figure", {}, el("img", { src: api.artifactUrl(studio.alignedRef!) }), el("figcaption", {}, "colorized")),
    );
    await refreshTagging();
    show(taggingView);
  } catch (err) {
    show(uploadView);
    uploadError.textContent = String(err);
  }
};

buildButton.onclick = async () => {
  show(trainingView);
  try {
    await studio.buildSession();
    grayImg.src = api.artifactUrl(studio.grayRef!);
    primaryImg.src = api.artifactUrl(studio.alignedRef!);
    setImage(editedImg, await studio.reconstructionRender());
    etaSlider.value = String(studio.etaIndex);
    etaLabel.textContent = studio.eta.toFixed(3);
    renderPickers();
    show(editView);
  } catch (err) {
    show(taggingView);
    previewLine.textContent = String(err);
  }
};

root.append(uploadView, trainingView, taggingView, editView);
show(uploadView);
