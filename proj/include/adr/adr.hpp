#pragma once

#include "adr/tensor.hpp"
#include "adr/ops.hpp"
#include "adr/nn.hpp"
#include "adr/optim.hpp"
#include "adr/gradcheck.hpp"
#include "adr/physics.hpp"
#include "adr/retinex.hpp"
#include "adr/enhance.hpp"
#include "adr/pipeline.hpp"
#include "adr/losses.hpp"
#include "adr/metrics.hpp"
#include "adr/image_io.hpp"
#include "adr/synth.hpp"
#include "adr/config.hpp"
#include "adr/checkpoint.hpp"
#include "adr/train.hpp"
