// Pure view-state machine: selections, submit gating, payload construction.
// No DOM access here, so the flow logic is unit-testable in isolation.

import type { GuessItem, RatingItem, RatingSlot, StudyItem, SubmitBody } from "./api.js";

export interface PendingRating {
  useful?: boolean;
  redundancy?: string;
}

export class ItemFlow {
  readonly item: StudyItem;
  private guess: number | null = null;
  private ratings = new Map<number, PendingRating>();

  constructor(item: StudyItem) {
    this.item = item;
  }

  get isGuess(): boolean {
    return this.item.experiment === 1;
  }

  selectGuess(classId: number): void {
    const options = (this.item as GuessItem).class_options;
    if (!options.includes(classId)) {
      throw new Error(`class ${classId} is not among the candidates`);
    }
    this.guess = classId;
  }

  selectedGuess(): number | null {
    return this.guess;
  }

  setUseful(prototypeId: number, useful: boolean): void {
    this.pending(prototypeId).useful = useful;
  }

  setRedundancy(prototypeId: number, choice: string): void {
    const allowed = (this.item as RatingItem).redundancy_choices;
    if (!allowed.includes(choice)) {
      throw new Error(`redundancy choice ${choice} not offered`);
    }
    this.pending(prototypeId).redundancy = choice;
  }

  private pending(prototypeId: number): PendingRating {
    if (!this.item.prototype_ids.includes(prototypeId)) {
      throw new Error(`prototype ${prototypeId} not part of this item`);
    }
    let slot = this.ratings.get(prototypeId);
    if (!slot) {
      slot = {};
      this.ratings.set(prototypeId, slot);
    }
    return slot;
  }

  /** Prototype ids still missing an answer (for highlighting). */
  missingSlots(): number[] {
    if (this.isGuess) return [];
    return this.item.prototype_ids.filter((pid) => {
      const slot = this.ratings.get(pid);
      return !slot || slot.useful === undefined || slot.redundancy === undefined;
    });
  }

  /** A guess needs exactly one selection; ratings need every slot complete. */
  canSubmit(): boolean {
    if (this.isGuess) return this.guess !== null;
    return this.missingSlots().length === 0;
  }

  buildPayload(): SubmitBody {
    if (!this.canSubmit()) {
      throw new Error("item is not complete");
    }
    if (this.isGuess) {
      return { item: this.item.id, guess: this.guess as number };
    }
    const ratings: Record<string, RatingSlot> = {};
    for (const pid of this.item.prototype_ids) {
      const slot = this.ratings.get(pid)!;
      ratings[String(pid)] = {
        useful: slot.useful as boolean,
        redundancy: slot.redundancy as string,
      };
    }
    return { item: this.item.id, ratings };
  }
}
