// DOM rendering: gallery, guess options, rating toggles, progress, completion.
// Everything shown derives from the API payloads; nothing else is persisted.

import type { GuessItem, NextResponse, RatingItem, StudyApi } from "./api.js";
import { ItemFlow } from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderProgress(doc: Document, answered: number, total: number): HTMLElement {
  const wrap = el(doc, "div", "progress");
  wrap.setAttribute("role", "progressbar");
  const bar = el(doc, "div", "progress-bar");
  bar.style.width = total > 0 ? `${(100 * answered) / total}%` : "0%";
  wrap.appendChild(bar);
  wrap.appendChild(el(doc, "span", "progress-label", `${answered} / ${total}`));
  return wrap;
}

function renderGallery(doc: Document, api: StudyApi, images: string[], ids: number[]): HTMLElement {
  const gallery = el(doc, "div", "gallery");
  images.forEach((name, i) => {
    const fig = el(doc, "figure", "proto");
    const img = el(doc, "img");
    img.src = api.assetUrl(name);
    img.alt = `prototype ${ids[i]}`;
    fig.appendChild(img);
    fig.appendChild(el(doc, "figcaption", undefined, `prototype ${ids[i]}`));
    gallery.appendChild(fig);
  });
  return gallery;
}

export function renderGuessView(
  doc: Document,
  api: StudyApi,
  item: GuessItem,
  flow: ItemFlow,
  onSubmit: () => void,
): HTMLElement {
  const root = el(doc, "div", "view guess-view");
  root.appendChild(el(doc, "h2", undefined, "Which class do these prototypes belong to?"));
  root.appendChild(renderGallery(doc, api, item.prototype_images, item.prototype_ids));

  const list = el(doc, "div", "options");
  const submit = el(doc, "button", "submit", "Submit guess");
  submit.disabled = true;

  for (const classId of item.class_options) {
    const label = el(doc, "label", "option");
    const radio = el(doc, "input");
    radio.type = "radio";
    radio.name = "guess";
    radio.value = String(classId);
    radio.addEventListener("change", () => {
      flow.selectGuess(classId);
      submit.disabled = !flow.canSubmit();
    });
    label.appendChild(radio);
    label.appendChild(
      el(doc, "span", undefined, item.class_names[String(classId)] ?? `class ${classId}`),
    );
    list.appendChild(label);
  }
  root.appendChild(list);

  submit.addEventListener("click", () => {
    if (flow.canSubmit()) onSubmit();
  });
  root.appendChild(submit);
  return root;
}

export function renderRatingView(
  doc: Document,
  api: StudyApi,
  item: RatingItem,
  flow: ItemFlow,
  onSubmit: () => void,
): HTMLElement {
  const root = el(doc, "div", "view rating-view");
  const name = item.revealed_class_name ?? `class ${item.revealed_class}`;
  root.appendChild(el(doc, "h2", undefined, `Rate the prototypes of ${name}`));

  const submit = el(doc, "button", "submit", "Submit ratings");
  submit.disabled = true;

  const refresh = () => {
    submit.disabled = !flow.canSubmit();
    const missing = new Set(flow.missingSlots());
    root.querySelectorAll<HTMLElement>(".proto-row").forEach((row) => {
      const pid = Number(row.dataset.prototype);
      row.classList.toggle("missing", missing.has(pid));
    });
  };

  for (let i = 0; i < item.prototype_ids.length; i++) {
    const pid = item.prototype_ids[i];
    const row = el(doc, "div", "proto-row missing");
    row.dataset.prototype = String(pid);

    const img = el(doc, "img");
    img.src = api.assetUrl(item.prototype_images[i]);
    img.alt = `prototype ${pid}`;
    row.appendChild(img);

    const usefulBox = el(doc, "div", "toggles useful-toggles");
    usefulBox.appendChild(el(doc, "span", undefined, "useful for recognizing the class?"));
    for (const value of [true, false]) {
      const label = el(doc, "label", "option");
      const radio = el(doc, "input");
      radio.type = "radio";
      radio.name = `useful-${pid}`;
      radio.addEventListener("change", () => {
        flow.setUseful(pid, value);
        refresh();
      });
      label.appendChild(radio);
      label.appendChild(el(doc, "span", undefined, value ? "yes" : "no"));
      usefulBox.appendChild(label);
    }
    row.appendChild(usefulBox);

    const redBox = el(doc, "div", "toggles redundancy-toggles");
    redBox.appendChild(el(doc, "span", undefined, "compared to the others it is:"));
    for (const choice of item.redundancy_choices) {
      const label = el(doc, "label", "option");
      const radio = el(doc, "input");
      radio.type = "radio";
      radio.name = `redundancy-${pid}`;
      radio.addEventListener("change", () => {
        flow.setRedundancy(pid, choice);
        refresh();
      });
      label.appendChild(radio);
      label.appendChild(el(doc, "span", undefined, choice.replace("_", " ")));
      redBox.appendChild(label);
    }
    row.appendChild(redBox);
    root.appendChild(row);
  }

  submit.addEventListener("click", () => {
    if (flow.canSubmit()) onSubmit();
  });
  root.appendChild(submit);
  return root;
}

export function renderDone(doc: Document, next: NextResponse): HTMLElement {
  const root = el(doc, "div", "view done-view");
  root.appendChild(el(doc, "h2", undefined, "All done, thank you!"));
  root.appendChild(
    el(doc, "p", undefined, `You answered ${next.answered} of ${next.total} items.`),
  );
  return root;
}

export function renderError(doc: Document, message: string): HTMLElement {
  const root = el(doc, "div", "view error-view");
  root.appendChild(el(doc, "h2", undefined, "Something went wrong"));
  root.appendChild(el(doc, "p", undefined, message));
  return root;
}
