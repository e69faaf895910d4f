import { describe, expect, it } from "vitest";

import type { GuessItem, RatingItem } from "../src/api.js";
import { ItemFlow } from "../src/state.js";

const guessItem: GuessItem = {
  id: "guess-protopnet-c0",
  experiment: 1,
  method: "protopnet",
  prototype_images: ["a.png", "b.png"],
  prototype_ids: [0, 1],
  class_options: [0, 1, 2],
  class_names: { "0": "class 0", "1": "class 1", "2": "class 2" },
};

const ratingItem: RatingItem = {
  id: "rate-protopnet-c0",
  experiment: 2,
  method: "protopnet",
  prototype_images: ["a.png", "b.png"],
  prototype_ids: [0, 1],
  revealed_class: 0,
  redundancy_choices: ["redundant", "non_redundant", "not_meaningful"],
};

describe("guess flow", () => {
  it("cannot submit before a class is selected", () => {
    const flow = new ItemFlow(guessItem);
    expect(flow.canSubmit()).toBe(false);
    expect(() => flow.buildPayload()).toThrow();
  });

  it("submits the selected class", () => {
    const flow = new ItemFlow(guessItem);
    flow.selectGuess(2);
    expect(flow.canSubmit()).toBe(true);
    expect(flow.buildPayload()).toEqual({ item: "guess-protopnet-c0", guess: 2 });
  });

  it("rejects classes outside the candidate list", () => {
    const flow = new ItemFlow(guessItem);
    expect(() => flow.selectGuess(9)).toThrow();
  });

  it("last selection wins", () => {
    const flow = new ItemFlow(guessItem);
    flow.selectGuess(0);
    flow.selectGuess(1);
    expect(flow.buildPayload().guess).toBe(1);
  });
});

describe("rating flow", () => {
  it("requires both answers for every prototype", () => {
    const flow = new ItemFlow(ratingItem);
    expect(flow.missingSlots()).toEqual([0, 1]);

    flow.setUseful(0, true);
    flow.setRedundancy(0, "redundant");
    expect(flow.missingSlots()).toEqual([1]);
    expect(flow.canSubmit()).toBe(false);

    flow.setUseful(1, false);
    expect(flow.missingSlots()).toEqual([1]); // still missing redundancy
    flow.setRedundancy(1, "non_redundant");
    expect(flow.missingSlots()).toEqual([]);
    expect(flow.canSubmit()).toBe(true);
  });

  it("builds a complete ratings payload", () => {
    const flow = new ItemFlow(ratingItem);
    flow.setUseful(0, true);
    flow.setRedundancy(0, "not_meaningful");
    flow.setUseful(1, false);
    flow.setRedundancy(1, "redundant");
    expect(flow.buildPayload()).toEqual({
      item: "rate-protopnet-c0",
      ratings: {
        "0": { useful: true, redundancy: "not_meaningful" },
        "1": { useful: false, redundancy: "redundant" },
      },
    });
  });

  it("rejects unknown prototypes and choices", () => {
    const flow = new ItemFlow(ratingItem);
    expect(() => flow.setUseful(7, true)).toThrow();
    expect(() => flow.setRedundancy(0, "maybe")).toThrow();
  });
});
