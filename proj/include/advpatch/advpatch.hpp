#pragma once

// Everything except the command-line layer (cli.hpp, which needs CLI11 and yaml-cpp).
#include "advpatch/blackbox.hpp"
#include "advpatch/color.hpp"
#include "advpatch/colorsim.hpp"
#include "advpatch/core.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/geometry.hpp"
#include "advpatch/io.hpp"
#include "advpatch/losses.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/nn.hpp"
#include "advpatch/optimize.hpp"
#include "advpatch/parallel.hpp"
#include "advpatch/render.hpp"
#include "advpatch/rng.hpp"
