#pragma once

#include "distillkit/acf.hpp"
#include "distillkit/binio.hpp"
#include "distillkit/common.hpp"
#include "distillkit/confidence.hpp"
#include "distillkit/config.hpp"
#include "distillkit/data.hpp"
#include "distillkit/evaluate.hpp"
#include "distillkit/gaussian.hpp"
#include "distillkit/hash.hpp"
#include "distillkit/layers.hpp"
#include "distillkit/losses.hpp"
#include "distillkit/network.hpp"
#include "distillkit/optimizer.hpp"
#include "distillkit/ppm.hpp"
#include "distillkit/rng.hpp"
#include "distillkit/tensor.hpp"
#include "distillkit/train.hpp"
#include "distillkit/weights_io.hpp"
