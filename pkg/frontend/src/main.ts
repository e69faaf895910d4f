// Browser entry point.

import { StudyApp, configFromLocation } from "./app.js";

const mount = document.getElementById("app");
if (!mount) {
  throw new Error("missing #app mount point");
}
const app = new StudyApp(document, mount, configFromLocation(window.location));
void app.start();
