/** Screening review state: a grid of pending candidates with accept/reject
 * decisions and keyboard navigation. Decided items leave the grid; a 409
 * (someone else decided first) also removes the item after a refresh. */

import { ApiError, type ApiClient } from "./api";
import type { ScreeningItem } from "./types";

export class ScreeningReview {
  items: ScreeningItem[] = [];
  focusedIndex = 0;
  loaded = false;
  lastError: string | null = null;

  constructor(
    private api: ApiClient,
    private reviewer: string,
  ) {}

  get isEmpty(): boolean {
    return this.loaded && this.items.length === 0;
  }

  get focused(): ScreeningItem | null {
    return this.items[this.focusedIndex] ?? null;
  }

  async load(): Promise<void> {
    this.items = await this.api.screeningPending();
    this.focusedIndex = 0;
    this.loaded = true;
  }

  focusNext(): void {
    if (this.items.length > 0) {
      this.focusedIndex = (this.focusedIndex + 1) % this.items.length;
    }
  }

  focusPrev(): void {
    if (this.items.length > 0) {
      this.focusedIndex = (this.focusedIndex + this.items.length - 1) % this.items.length;
    }
  }

  private removeItem(itemId: string): void {
    this.items = this.items.filter((it) => it.id !== itemId);
    if (this.focusedIndex >= this.items.length) {
      this.focusedIndex = Math.max(0, this.items.length - 1);
    }
  }

  async decide(itemId: string, verdict: "accepted" | "rejected"): Promise<void> {
    this.lastError = null;
    try {
      await this.api.screeningDecide(itemId, verdict, this.reviewer);
      this.removeItem(itemId);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // already decided elsewhere: drop it from the grid
        this.removeItem(itemId);
        this.lastError = err.message;
      } else {
        this.lastError = err instanceof Error ? err.message : String(err);
        throw err;
      }
    }
  }

  /** Keyboard shortcuts: a = accept focused, r = reject focused. */
  async key(k: string): Promise<boolean> {
    const item = this.focused;
    if (!item) {
      return false;
    }
    if (k === "a") {
      await this.decide(item.id, "accepted");
      return true;
    }
    if (k === "r") {
      await this.decide(item.id, "rejected");
      return true;
    }
    return false;
  }
}
