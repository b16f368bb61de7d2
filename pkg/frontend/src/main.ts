import { ReviewApi } from "./api.js";
import { ReviewApp } from "./ui.js";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app element");
}
const app = new ReviewApp(new ReviewApi(""), root);
void app.start();
