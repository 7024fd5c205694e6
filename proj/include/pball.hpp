#pragma once

#include "pball/ablation.hpp"
#include "pball/container.hpp"
#include "pball/data.hpp"
#include "pball/error.hpp"
#include "pball/eval.hpp"
#include "pball/geometry.hpp"
#include "pball/graph.hpp"
#include "pball/image.hpp"
#include "pball/kernels.hpp"
#include "pball/model.hpp"
#include "pball/parallel.hpp"
#include "pball/perturb.hpp"
#include "pball/report.hpp"
#include "pball/rng.hpp"
#include "pball/saliency.hpp"
#include "pball/sanity.hpp"
#include "pball/tensor.hpp"
#include "pball/train.hpp"
