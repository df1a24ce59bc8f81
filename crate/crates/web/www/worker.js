import init, { tradeoff_curve, policy_thresholds, pruning_curve } from "./pkg/itererm_web.js";

const ops = { tradeoff_curve, policy_thresholds, pruning_curve };
const ready = init();

self.onmessage = async ({ data: { id, op, args } }) => {
  await ready;
  try {
    self.postMessage({ id, result: JSON.parse(ops[op](...args)) });
  } catch (e) {
    self.postMessage({ id, error: String(e.message || e) });
  }
};
