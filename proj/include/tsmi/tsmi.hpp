#pragma once

#include "tsmi/causal_graph.hpp"
#include "tsmi/checkpoint.hpp"
#include "tsmi/dataset.hpp"
#include "tsmi/model.hpp"
#include "tsmi/optim.hpp"
#include "tsmi/patching.hpp"
#include "tsmi/report.hpp"
#include "tsmi/sae.hpp"
#include "tsmi/saliency.hpp"
#include "tsmi/trainer.hpp"
